use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::modulators::{attach, ModulatorKind};
use crate::numerics::{AdamW, AdamWConfig};
use crate::trajectory::{make_context, ActionTokenizer, ContextShape, Trajectory, UnifiedStateLayout};

fn tiny() -> MddtConfig {
    MddtConfig {
        n_layers: 2,
        n_heads: 2,
        embed_dim: 16,
        context_len: 3,
        action_bins: 8,
        max_action_dim: 2,
        state_dim: 5,
        dropout: 0.0,
        max_episode_len: 16,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn logits_have_expected_shape_and_are_deterministic() {
    let cfg = tiny();
    let model = Mddt::<f32>::new(cfg.clone(), &mut rng(0)).unwrap();
    let ctx = random_context(&cfg, 2, &mut rng(1));
    let a = model.logits(&ctx, &Modulation::none()).unwrap();
    let b = model.logits(&ctx, &Modulation::none()).unwrap();
    assert_eq!(a.shape(), &[cfg.seq_len(), cfg.vocab()]);
    assert!(a.is_finite());
    assert_eq!(a, b);
}

#[test]
fn mismatched_context_is_rejected() {
    let cfg = tiny();
    let model = Mddt::<f32>::new(cfg.clone(), &mut rng(0)).unwrap();
    let other = MddtConfig {
        context_len: 4,
        ..cfg.clone()
    };
    let ctx = random_context(&other, 2, &mut rng(1));
    assert!(matches!(
        model.logits(&ctx, &Modulation::none()),
        Err(Error::ShapeMismatch { .. })
    ));
    let mut late = random_context(&cfg, 2, &mut rng(1));
    late.timesteps[2] = 99;
    assert!(model.logits(&late, &Modulation::none()).is_err());
}

/// Modifies the input feeding sequence position `p`.
fn perturb(ctx: &mut ModelContext, cfg: &MddtConfig, p: usize) {
    let (c, k) = (p / cfg.tokens_per_step(), p % cfg.tokens_per_step());
    ctx.valid[c] = true;
    match k {
        0 => ctx.rtgs[c] += 3.0,
        1 => ctx.states[c * cfg.state_dim] += 1.5,
        k if k == cfg.tokens_per_step() - 1 => ctx.rewards[c] += 2.0,
        k => {
            let slot = k - 2;
            let id = ctx.action_tokens(c)[slot];
            ctx.set_action_token(c, slot, (id + 3) % cfg.action_bins);
        }
    }
}

#[test]
fn earlier_logits_ignore_later_tokens() {
    let cfg = tiny();
    let model = Mddt::<f32>::new(cfg.clone(), &mut rng(3)).unwrap();
    let mut r = rng(4);
    for _ in 0..20 {
        let mut ctx = random_context(&cfg, 2, &mut r);
        ctx.valid.iter_mut().for_each(|v| *v = true);
        let base = model.logits(&ctx, &Modulation::none()).unwrap();
        let p = r.gen_range(1..cfg.seq_len());
        perturb(&mut ctx, &cfg, p);
        let after = model.logits(&ctx, &Modulation::none()).unwrap();
        for pos in 0..p {
            for (x, y) in base.row(pos).iter().zip(after.row(pos)) {
                assert!((x - y).abs() <= 1e-6, "position {pos} moved after perturbing {p}");
            }
        }
        assert_ne!(base.row(p), after.row(p));
    }
}

#[test]
fn every_token_of_a_step_shares_the_timestep_vector() {
    let cfg = tiny();
    let mut model = Mddt::<f64>::new(cfg.clone(), &mut rng(5)).unwrap();
    let keep = ["embed.timestep"];
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| n.starts_with("embed."))
        .map(str::to_string)
        .collect();
    for n in names.iter().filter(|n| !keep.contains(&n.as_str())) {
        model
            .params
            .get_mut(n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let ctx = random_context(&cfg, 2, &mut rng(6));
    let mut g = Graph::no_grad();
    let batch = std::slice::from_ref(&ctx);
    let tok = model.embed_tokens(&mut g, batch).unwrap();
    let pos = model.positional(&mut g, batch).unwrap();
    let x = g.add(tok, pos).unwrap();
    let table = model.params.get("embed.timestep").unwrap();
    for p in 0..cfg.seq_len() {
        let t = ctx.timesteps[p / cfg.tokens_per_step()];
        assert_eq!(g.value(x).row(p), table.row(t));
    }
}

fn reach_like_contexts(cfg: &MddtConfig, n: usize, seed: u64) -> Vec<ModelContext> {
    // only unified dims 0, 1 and 4 are ever populated
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut ctx = random_context(cfg, 2, &mut r);
            for c in 0..cfg.context_len {
                for (i, s) in ctx.states[c * cfg.state_dim..(c + 1) * cfg.state_dim]
                    .iter_mut()
                    .enumerate()
                {
                    if ![0, 1, 4].contains(&i) {
                        *s = 0.0;
                    }
                }
            }
            ctx
        })
        .collect()
}

#[test]
fn unused_state_dims_get_exactly_zero_gradient() {
    let cfg = tiny();
    let model = Mddt::<f32>::new(cfg.clone(), &mut rng(7)).unwrap();
    let batch = reach_like_contexts(&cfg, 4, 8);
    let mut g = Graph::new();
    let (loss, _) = model.action_loss(&mut g, &batch, &Modulation::none(), None).unwrap();
    let grads = g.backward(loss).unwrap();
    let w = grads.get("embed.state.w").unwrap();
    for i in 0..cfg.state_dim {
        let zero = w.row(i).iter().all(|&v| v == 0.0);
        assert_eq!(zero, ![0, 1, 4].contains(&i), "row {i}");
    }
}

fn loss_of(model: &Mddt<f64>, batch: &[ModelContext], m: &Modulation) -> f64 {
    let mut g = Graph::no_grad();
    let (loss, _) = model.action_loss(&mut g, batch, m, None).unwrap();
    g.value(loss).item()
}

fn grad_check(model: &mut Mddt<f64>, batch: &[ModelContext], m: &Modulation, probes: usize, seed: u64) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = model.action_loss(&mut g, batch, m, None).unwrap();
    let grads = g.backward(loss).unwrap();
    let names = model.params.trainable_names();
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let name = &names[r.gen_range(0..names.len())];
        let i = r.gen_range(0..model.params.get(name).unwrap().numel());
        let h = 1e-6;
        let orig = model.params.get(name).unwrap().data()[i];
        model.params.get_mut(name).unwrap().data_mut()[i] = orig + h;
        let up = loss_of(model, batch, m);
        model.params.get_mut(name).unwrap().data_mut()[i] = orig - h;
        let down = loss_of(model, batch, m);
        model.params.get_mut(name).unwrap().data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(name).unwrap().data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn full_loss_matches_finite_differences() {
    let cfg = MddtConfig {
        context_len: 2,
        ..tiny()
    };
    let mut model = Mddt::<f64>::new(cfg.clone(), &mut rng(9)).unwrap();
    let mut r = rng(10);
    let batch: Vec<_> = (0..3).map(|_| random_context(&cfg, 2, &mut r)).collect();
    assert!(grad_check(&mut model, &batch, &Modulation::none(), 40, 11) <= 1e-4);
}

#[test]
fn modulated_losses_match_finite_differences() {
    let cfg = MddtConfig {
        context_len: 2,
        ..tiny()
    };
    let mut r = rng(12);
    let batch: Vec<_> = (0..2).map(|_| random_context(&cfg, 2, &mut r)).collect();
    let kinds = [
        ModulatorKind::lora(2),
        ModulatorKind::Ia3,
        ModulatorKind::Adapter { reduction: 4 },
        ModulatorKind::Prompt {
            mode: PromptMode::Prompt,
            len: 3,
        },
        ModulatorKind::Prompt {
            mode: PromptMode::Prefix,
            len: 3,
        },
        ModulatorKind::Prompt {
            mode: PromptMode::PTuningV2,
            len: 3,
        },
    ];
    for kind in kinds {
        let mut model = Mddt::<f64>::new(cfg.clone(), &mut rng(13)).unwrap();
        let m = attach(&mut model, &kind, "mod.x", &mut r).unwrap();
        // move off the zero-initialised point so every path carries signal
        for name in model.params.trainable_names() {
            model
                .params
                .get_mut(&name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += r.gen_range(-0.3..0.3));
        }
        let err = grad_check(&mut model, &batch, &m, 30, 14);
        assert!(err <= 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let logits = Tensor::<f64>::zeros(&[4, 65]);
    let loss = action_loss_from_logits(&logits, &[0, 10, 20, 64], &[true; 4]).unwrap();
    assert!((loss - 65f64.ln()).abs() < 1e-12);
    assert!(matches!(
        action_loss_from_logits(&logits, &[0; 4], &[false; 4]),
        Err(Error::EmptyMask)
    ));
}

#[test]
fn confident_logits_give_near_zero_loss() {
    let mut logits = Tensor::<f64>::zeros(&[2, 65]);
    logits.data_mut()[3] = 50.0;
    logits.data_mut()[65 + 7] = 50.0;
    assert!(action_loss_from_logits(&logits, &[3, 7], &[true, true]).unwrap() < 1e-18);
}

#[test]
fn masking_pad_targets_changes_the_loss() {
    // rows 1 and 3 are PAD slots the logits get badly wrong
    let mut logits = Tensor::<f64>::zeros(&[4, 65]);
    for (row, hot) in [(0, 5), (1, 0), (2, 9), (3, 0)] {
        logits.data_mut()[row * 65 + hot] = 12.0;
    }
    let targets = [5, 64, 9, 64];
    let masked = action_loss_from_logits(&logits, &targets, &[true, false, true, false]).unwrap();
    let unmasked = action_loss_from_logits(&logits, &targets, &[true; 4]).unwrap();
    assert!(masked < 0.01 && unmasked > 1.0);
}

#[test]
fn masked_argmax_never_returns_pad() {
    let row = [0.1f32, 0.7, 0.3, 9.0];
    assert_eq!(masked_argmax(&row, 3), 1);
    assert_eq!(masked_argmax(&[0.0f32, 0.0, 0.0], 2), 0);
}

#[test]
fn overfit_model_decodes_the_constant_action() {
    let cfg = MddtConfig {
        action_bins: 64,
        state_dim: 3,
        ..tiny()
    };
    let mut r = rng(15);
    let mut layout = UnifiedStateLayout::new(3);
    layout.register("c", vec![0, 1, 2]).unwrap();
    let tok = ActionTokenizer::new(64).unwrap();
    let shape = ContextShape {
        context_len: cfg.context_len,
        max_action_dim: cfg.max_action_dim,
    };
    let mut contexts = Vec::new();
    for _ in 0..10 {
        let states: Vec<f32> = (0..8 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let actions = [0.5f32, -0.5].repeat(8);
        let traj = Trajectory::new("c", 3, 2, states, actions, vec![0.5; 8]).unwrap();
        for t in 0..8 {
            contexts.push(make_context(&traj, t, shape, &layout, &tok, 1.0).unwrap());
        }
    }
    let mut model = Mddt::<f32>::new(cfg.clone(), &mut r).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    for step in 0..150 {
        let batch: Vec<_> = (0..8)
            .map(|i| contexts[(step * 8 + i) % contexts.len()].clone())
            .collect();
        let mut g = Graph::new();
        let (loss, _) = model.action_loss(&mut g, &batch, &Modulation::none(), None).unwrap();
        let grads = g.backward(loss).unwrap();
        opt.step(&mut model.params, &grads, 3e-3).unwrap();
    }
    let mut probe = vec![contexts[13].clone()];
    probe[0].set_action_token(cfg.context_len - 1, 0, 64);
    probe[0].set_action_token(cfg.context_len - 1, 1, 64);
    let ids = decode_actions(&model, &mut probe, &[Modulation::none()], 2).unwrap();
    let decoded: Vec<f32> = ids[0].iter().map(|&i| tok.detokenize(i)).collect();
    assert!((decoded[0] - 0.5).abs() <= 1.0 / 64.0, "{decoded:?}");
    assert!((decoded[1] + 0.5).abs() <= 1.0 / 64.0, "{decoded:?}");
    let one = decode_actions(&model, &mut probe, &[Modulation::none()], 1).unwrap();
    assert_eq!(one[0].len(), 1);
}

#[test]
fn checkpoint_round_trip_and_bad_magic() {
    let cfg = tiny();
    let model = Mddt::<f32>::new(cfg, &mut rng(16)).unwrap();
    let ckpt = Checkpoint {
        model,
        kind: "base".into(),
        pool: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mddt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.model.config, ckpt.model.config);
    assert_eq!(
        back.model.params.byte_snapshot(|_| true),
        ckpt.model.params.byte_snapshot(|_| true)
    );
    let mut bytes = std::fs::read(&path).unwrap();
    let wide: Checkpoint<f64> = load_checkpoint(&path).unwrap();
    assert_eq!(wide.model.params.len(), ckpt.model.params.len());
    bytes[0] = b'X';
    assert!(matches!(decode_archive::<f32>(&bytes), Err(Error::BadMagic { .. })));
    bytes[0] = b'M';
    assert!(matches!(
        decode_archive::<f32>(&bytes[..bytes.len() - 2]),
        Err(Error::Truncated { .. })
    ));
}

#[test]
fn embeddings_have_model_width_and_pool_constant_data() {
    let cfg = tiny();
    let model = Mddt::<f32>::new(cfg.clone(), &mut rng(17)).unwrap();
    let ctx = random_context(&cfg, 2, &mut rng(18));
    let seqs = vec![("a".to_string(), vec![ctx.clone(), ctx.clone(), ctx])];
    let rows = export_embeddings(&model, &seqs, LayerSel::Embed, TokenType::State).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r.vector.len() == cfg.embed_dim && r.vector == rows[0].vector));
    assert!(export_embeddings(&model, &seqs, LayerSel::Block(5), TokenType::State).is_err());
    assert!("bogus".parse::<TokenType>().is_err());
    let mut buf = Vec::new();
    write_embeddings_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("task_id,e0,"));
}
