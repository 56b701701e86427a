//! Pretraining, single-task and continual fine-tuning, evaluation, metrics and the CLI.

pub mod cli;
mod config;
pub mod metrics;
mod pipeline;
mod trainer;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use config::{Mode, RunConfig};
pub use metrics::{forgetting, iqm, iqm_ci, normalized_score, EvalRecord, MetricsLog};
pub use pipeline::{
    evaluate_all, finetune_continual, finetune_single, load_suite, pretrain, train_pretrain_keys, PretrainReport,
    SingleReport,
};
pub use trainer::{Learner, Suite, TaskEval};

/// Every fine-tuning strategy the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ft,
    FtHead,
    FtLastHead,
    Adapters,
    Lora,
    Ia3,
    Prompt,
    Prefix,
    PTuningV2,
    L2pPt,
    L2pPret,
    L2pPv2,
    L2m,
    L2mOracle,
    Ewc,
    L2,
    FtMtScratch,
    FtMtPretrained,
}

impl Method {
    pub const ALL: [Method; 18] = [
        Method::Ft,
        Method::FtHead,
        Method::FtLastHead,
        Method::Adapters,
        Method::Lora,
        Method::Ia3,
        Method::Prompt,
        Method::Prefix,
        Method::PTuningV2,
        Method::L2pPt,
        Method::L2pPret,
        Method::L2pPv2,
        Method::L2m,
        Method::L2mOracle,
        Method::Ewc,
        Method::L2,
        Method::FtMtScratch,
        Method::FtMtPretrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::FtHead => "ft-head",
            Method::FtLastHead => "ft-last-head",
            Method::Adapters => "adapters",
            Method::Lora => "lora",
            Method::Ia3 => "ia3",
            Method::Prompt => "prompt",
            Method::Prefix => "prefix",
            Method::PTuningV2 => "ptv2",
            Method::L2pPt => "l2p-pt",
            Method::L2pPret => "l2p-pret",
            Method::L2pPv2 => "l2p-pv2",
            Method::L2m => "l2m",
            Method::L2mOracle => "l2m-oracle",
            Method::Ewc => "ewc",
            Method::L2 => "l2",
            Method::FtMtScratch => "ft-mt-scratch",
            Method::FtMtPretrained => "ft-mt-pretrained",
        }
    }

    pub fn list() -> String {
        Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
    }

    /// Key-addressed (or task-addressed) pools of bundles.
    pub fn is_pool(self) -> bool {
        matches!(
            self,
            Method::L2pPt | Method::L2pPret | Method::L2pPv2 | Method::L2m | Method::L2mOracle
        )
    }

    pub fn is_prompt_based(self) -> bool {
        matches!(
            self,
            Method::Prompt | Method::Prefix | Method::PTuningV2 | Method::L2pPt | Method::L2pPret | Method::L2pPv2
        )
    }

    pub fn is_multitask(self) -> bool {
        matches!(self, Method::FtMtScratch | Method::FtMtPretrained)
    }

    /// Methods that update the transformer's own weights.
    pub fn trains_base(self) -> bool {
        matches!(
            self,
            Method::Ft
                | Method::FtHead
                | Method::FtLastHead
                | Method::Ewc
                | Method::L2
                | Method::FtMtScratch
                | Method::FtMtPretrained
        )
    }

    pub fn default_lr(self) -> f64 {
        if self.is_prompt_based() {
            1e-3
        } else {
            1e-4
        }
    }

    /// Modulator-based methods train without dropout; prompt methods and full
    /// fine-tuning keep the model's rate.
    pub fn uses_dropout(self) -> bool {
        self.trains_base() || self.is_prompt_based()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`; expected one of: {}", Method::list())))
    }
}
