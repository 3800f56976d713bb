//! One line per acceptance criterion. Exits non-zero if any fails.

#![allow(clippy::field_reassign_with_default)]

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use fedsplit::config::RunConfig;
use fedsplit::run::{self, CKPT_DIR, METRICS, PREALIGN_CKPT};
use fedsplit_core::align::{alignment_loss, alignment_loss_and_grad, sample_batch, AlignConfig};
use fedsplit_core::costs::{comm_per_round, count_trainable, reference_model, Scope, BYTES_PER_MB, BYTES_PER_PARAM};
use fedsplit_core::data::{
    generate_mix, partition, PartitionScheme, PartitionSpec, TaskKind, TaskMix, TaskParams, Weight,
};
use fedsplit_core::fedcore::{
    aggregate, broadcast, client_loss_and_grad, client_objective, client_phase, evaluate, init_clients, init_server,
    local_update, pre_align, reconstruct, server_aggregate, server_align, Federation, Mode, RoundConfig, Update,
};
use fedsplit_core::model::{
    assemble, extract_layers, inject_lora, Assembly, Batch, KeepRatio, LoraConfig, LoraSet, ModelConfig, Placement,
    TransformerStack,
};
use fedsplit_core::optim::{OptimConfig, OptimizerKind};
use fedsplit_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn keep(s: &str) -> KeepRatio {
    s.parse().expect("literal keep ratio")
}

// Criterion 1

fn extraction_oracle() -> Check {
    // (s, dropout) -> emulator layers at n = 32
    let table = [(4, "0.2", 22), (2, "0.2", 24), (4, "0.5", 14), (2, "0.5", 15)];
    let mut seen = Vec::new();
    for (s, beta, want) in table {
        let k = KeepRatio::from_dropout(beta).map_err(|e| e.to_string())?;
        for placement in [Placement::Tail, Placement::Split] {
            let plan = extract_layers(32, s, k, placement).map_err(|e| e.to_string())?;
            ensure(plan.emulator.len() == want, || {
                format!(
                    "s={s} beta={beta} {placement:?}: {} layers, want {want}",
                    plan.emulator.len()
                )
            })?;
        }
        seen.push(format!("(s={s},β={beta})→{want}"));
    }
    Ok(seen.join(" "))
}

// Criterion 2

fn cost_table() -> Check {
    let model = reference_model();
    let lora = LoraConfig::default();
    ensure(model.d_model == 4096 && lora.rank == 8 && BYTES_PER_PARAM == 4, || {
        "reference setup drifted".into()
    })?;
    // (method, s, dropout, MB per round)
    let table = [
        (Mode::FedOT, 4, "0.2", 4.19),
        (Mode::FedBiOT, 2, "0.2", 14.68),
        (Mode::FedBiOT, 4, "0.2", 15.73),
        (Mode::FedBiOT, 2, "0.5", 9.96),
        (Mode::FedBiOT, 4, "0.5", 11.53),
    ];
    let mut worst: f64 = 0.0;
    for (mode, s, beta, mb) in table {
        let plan = extract_layers(32, s, KeepRatio::from_dropout(beta).unwrap(), mode.placement()).unwrap();
        let (down, up) = comm_per_round(&plan, &model, &lora, mode, BYTES_PER_PARAM);
        let got = (down + up) as f64 / BYTES_PER_MB;
        let rel = (got - mb).abs() / mb;
        worst = worst.max(rel);
        ensure(rel <= 0.01, || {
            format!("{} s={s} β={beta}: {got:.4} MB vs {mb}", mode.name())
        })?;
    }
    // q and v LoRA per layer: 2 * r * (d_in + d_out)
    let per_layer = 2 * 8 * (4096 + 4096);
    for (s, want) in [(2, 262_144), (4, 524_288)] {
        ensure(per_layer * s == want, || "oracle arithmetic".into())?;
        for mode in [Mode::FedBiOT, Mode::FedOT] {
            let plan = extract_layers(32, s, keep("0.8"), mode.placement()).unwrap();
            let got = count_trainable(&plan, &model, &lora, Scope::Client);
            ensure(got == want, || {
                format!("{} s={s}: {got} trainable, want {want}", mode.name())
            })?;
        }
    }
    Ok(format!("max MB rel err {:.2e}; trainable 262144 / 524288 exact", worst))
}

// Criterion 3

fn toy_model(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 4,
        d_ff: 192,
        vocab_size: 64,
        max_seq_len: 64,
        rng_seed: seed,
    }
}

fn jitter<T: Scalar>(set: &mut LoraSet<T>, rng: &mut ChaCha8Rng, amp: f64) {
    for b in set.buffers_mut() {
        b.iter_mut()
            .for_each(|x| *x = T::lit(x.as_f64() + rng.random_range(-amp..amp)));
    }
}

fn directional_check(
    grads: &[Vec<f64>],
    point: &LoraSet<f64>,
    f: impl Fn(&LoraSet<f64>) -> f64,
    rng: &mut ChaCha8Rng,
    directions: usize,
) -> f64 {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let dir: Vec<Vec<f64>> = grads
            .iter()
            .map(|g| g.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .flat_map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b))
            .sum();
        let at = |sign: f64| {
            let mut p = point.clone();
            for (buf, d) in p.buffers_mut().into_iter().zip(&dir) {
                buf.iter_mut().zip(d).for_each(|(x, di)| *x += sign * H * di);
            }
            f(&p)
        };
        let numeric = (at(1.0) - at(-1.0)) / (2.0 * H);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    worst
}

fn gradient_check() -> Check {
    const DIRECTIONS: usize = 24;
    let cfg = toy_model(11);
    let base = TransformerStack::<f64>::init(&cfg).unwrap();
    let plan = extract_layers(8, 2, keep("0.5"), Placement::Tail).unwrap();
    let lora = LoraConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut adapter = inject_lora::<f64>(&cfg, &plan.adapter(), &lora, 1).unwrap();
    let mut emulator = inject_lora::<f64>(&cfg, &plan.emulator, &lora, 2).unwrap();
    jitter(&mut adapter, &mut rng, 0.1);
    jitter(&mut emulator, &mut rng, 0.1);
    let params = TaskParams::default();
    let data = generate_mix(&TaskMix::uniform(&TaskKind::ALL), 32, 3, 0, 64, &params).unwrap();
    let batch = sample_batch(&data, 4, &mut rng, cfg.max_seq_len).unwrap();

    // client objective away from the anchor so the proximal term is active
    let anchor = reconstruct(&adapter);
    let mut local = adapter.clone();
    jitter(&mut local, &mut rng, 0.05);
    let eps = 3.0;
    let (loss, grads) = client_loss_and_grad(&batch, &plan, &base, &local, &emulator, &anchor, eps).unwrap();
    ensure(loss.prox > 0.0, || "proximal term inactive".into())?;
    let client = directional_check(
        &grads,
        &local,
        |p| {
            client_objective(&batch, &plan, &base, p, &emulator, &anchor, eps)
                .unwrap()
                .total()
        },
        &mut rng,
        DIRECTIONS,
    );

    let public = generate_mix(
        &TaskMix::uniform(&[TaskKind::Copy, TaskKind::Reverse]),
        32,
        4,
        0,
        64,
        &params,
    )
    .unwrap();
    let abatch = sample_batch(&public, 4, &mut rng, cfg.max_seq_len).unwrap();
    let (_, agrads) = alignment_loss_and_grad(&abatch, &plan, &base, &adapter, &emulator, 1.0).unwrap();
    let align = directional_check(
        &agrads,
        &emulator,
        |p| alignment_loss(&abatch, &plan, &base, &adapter, p, 1.0).unwrap(),
        &mut rng,
        DIRECTIONS,
    );
    ensure(client < 1e-4 && align < 1e-4, || {
        format!("client {client:.2e}, alignment {align:.2e}")
    })?;
    Ok(format!(
        "{DIRECTIONS} directions each: client max rel err {client:.2e}, alignment {align:.2e}"
    ))
}

// Criterion 4

fn bits<T: Scalar>(a: &[T]) -> Vec<u64> {
    a.iter().map(|x| x.as_f64().to_bits()).collect()
}

fn identity_for<T: Scalar>(label: &str) -> Result<(), String> {
    let cfg = toy_model(21);
    let base = TransformerStack::<T>::init(&cfg).unwrap();
    let lora = LoraConfig::default();
    let data = generate_mix(&TaskMix::uniform(&TaskKind::ALL), 8, 5, 0, 64, &TaskParams::default()).unwrap();
    let batch = Batch::pack(data.iter().map(|s| (&s.tokens[..], &s.gt_mask[..])), cfg.max_seq_len).unwrap();
    let plain = bits(base.logits(&batch).unwrap().data());
    for placement in [Placement::Tail, Placement::Split] {
        let plan = extract_layers(8, 2, keep("1"), placement).unwrap();
        let adapter = inject_lora::<T>(&cfg, &plan.adapter(), &lora, 1).unwrap();
        let emulator = inject_lora::<T>(&cfg, &plan.emulator, &lora, 2).unwrap();
        let full = assemble(&plan, &base, &adapter, None, Assembly::AdapFu)
            .unwrap()
            .logits(&batch)
            .unwrap();
        let emu = assemble(&plan, &base, &adapter, Some(&emulator), Assembly::AdapEmu)
            .unwrap()
            .logits(&batch)
            .unwrap();
        ensure(bits(full.data()) == plain, || {
            format!("{label} {placement:?}: injection changed the forward")
        })?;
        ensure(bits(emu.data()) == plain, || {
            format!("{label} {placement:?}: AdapEmu differs from full model")
        })?;
        let l = alignment_loss(&batch, &plan, &base, &adapter, &emulator, 1.0).unwrap();
        ensure(l == 0.0, || {
            format!("{label} {placement:?}: alignment loss {l:e} at identity")
        })?;
    }
    Ok(())
}

fn identity_invariants() -> Check {
    identity_for::<f32>("f32")?;
    identity_for::<f64>("f64")?;
    Ok("bitwise equal logits and zero alignment loss (f32, f64; tail and split)".into())
}

// Criterion 5

fn filled(value: impl Fn(usize) -> f64) -> LoraSet<f64> {
    let cfg = ModelConfig {
        n_layers: 4,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 16,
        max_seq_len: 8,
        rng_seed: 0,
    };
    let mut s = inject_lora::<f64>(&cfg, &[2, 3], &LoraConfig::default(), 0).unwrap();
    let mut k = 0;
    for b in s.buffers_mut() {
        for x in b.iter_mut() {
            *x = value(k);
            k += 1;
        }
    }
    s
}

fn w(num: usize, den: usize) -> Weight {
    Weight { num, den }
}

fn agg(parts: &[(usize, Weight, &LoraSet<f64>)]) -> LoraSet<f64> {
    let ups: Vec<Update<'_, f64>> = parts
        .iter()
        .map(|&(client_id, weight, lora)| Update {
            client_id,
            weight,
            lora,
        })
        .collect();
    aggregate(&ups).unwrap()
}

fn flat(s: &LoraSet<f64>) -> Vec<f64> {
    s.buffers().concat()
}

fn aggregation_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let sets: Vec<LoraSet<f64>> = (0..5)
        .map(|_| {
            let v: Vec<f64> = (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect();
            filled(|k| v[k % v.len()])
        })
        .collect();
    let weights = [w(1, 10), w(2, 10), w(3, 10), w(1, 5), w(1, 5)];
    let reference = flat(&agg(&(0..5).map(|i| (i, weights[i], &sets[i])).collect::<Vec<_>>()));
    let mut order: Vec<usize> = (0..5).collect();
    for _ in 0..20 {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let got = flat(&agg(&order
            .iter()
            .map(|&i| (i, weights[i], &sets[i]))
            .collect::<Vec<_>>()));
        ensure(bits(&got) == bits(&reference), || {
            format!("order {order:?} changed the result")
        })?;
    }

    let single = agg(&[(7, w(1, 1), &sets[0])]);
    ensure(bits(&flat(&single)) == bits(&flat(&sets[0])), || {
        "single client is not the identity".into()
    })?;

    // 1/4·4 + 3/4·8 = 7
    let two = agg(&[(0, w(1, 4), &filled(|_| 4.0)), (1, w(3, 4), &filled(|_| 8.0))]);
    ensure(flat(&two).iter().all(|&x| x == 7.0), || "two-client case".into())?;
    // 1/2·6 + 1/3·12 + 1/6·18 = 10
    let three = agg(&[
        (0, w(1, 2), &filled(|_| 6.0)),
        (1, w(1, 3), &filled(|_| 12.0)),
        (2, w(1, 6), &filled(|_| 18.0)),
    ]);
    ensure(flat(&three).iter().all(|&x| (x - 10.0).abs() < 1e-12), || {
        "three-client case".into()
    })?;
    let one = flat(&sets[1]);
    let neg = filled(|k| -one[k]);
    let zero = agg(&[(0, w(1, 2), &sets[1]), (1, w(1, 2), &neg)]);
    ensure(flat(&zero).iter().all(|&x| x == 0.0), || {
        "antisymmetric pair does not cancel".into()
    })?;
    // elementwise oracle on random inputs
    let flats: Vec<Vec<f64>> = sets.iter().map(flat).collect();
    let oracle: Vec<f64> = (0..reference.len())
        .map(|k| (0..5).map(|i| weights[i].as_f64() * flats[i][k]).sum())
        .collect();
    let err = reference
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(err < 1e-14, || format!("weighted mean off by {err:e}"))?;
    Ok(format!(
        "20 permutations bitwise equal; hand cases exact; random oracle err {err:.1e}"
    ))
}

// Criterion 6

fn proximal_pinning() -> Check {
    let cfg = toy_model(41);
    let base = TransformerStack::<f64>::init(&cfg).unwrap();
    let plan = extract_layers(8, 2, keep("0.5"), Placement::Tail).unwrap();
    let params = TaskParams::default();
    let public = generate_mix(&TaskMix::uniform(&[TaskKind::Copy]), 16, 1, 0, 64, &params).unwrap();
    let data = generate_mix(&TaskMix::uniform(&TaskKind::ALL), 40, 2, 0, 64, &params).unwrap();
    let align = AlignConfig::default();
    let rounds = RoundConfig {
        local_steps: 30,
        batch_size: 10,
        rounds: 1,
        // the prox curvature grows like 4ε, so plain SGD needs η·4·1e6 < 2
        optim: OptimConfig {
            kind: OptimizerKind::Sgd,
            lr: 1e-7,
            ..Default::default()
        },
        mode: Mode::FedBiOT,
        prox_eps: 1.0,
    };
    let fed = Federation {
        plan: &plan,
        base: &base,
        public: &public,
        align: &align,
        rounds: &rounds,
        seed: 42,
    };
    let mut server = init_server(&fed, &LoraConfig::default()).unwrap();
    jitter(&mut server.adapter, &mut ChaCha8Rng::seed_from_u64(43), 0.2);
    let snap = broadcast(&server);
    let anchor = reconstruct(&snap.adapter);
    let shard = partition(
        &data,
        &PartitionSpec {
            scheme: PartitionScheme::Iid,
            clients: 1,
            seed: 0,
        },
    )
    .unwrap();
    let mut dists = Vec::new();
    for eps in [1.0, 10.0, 1e3, 1e6] {
        let with_eps = RoundConfig {
            prox_eps: eps,
            ..rounds.clone()
        };
        let mut c = init_clients(&fed, shard.clone(), &server).unwrap().remove(0);
        local_update(&mut c, &snap, &with_eps, &plan, &base, 0).unwrap();
        let mut d = reconstruct(&c.adapter);
        d.data_mut().iter_mut().zip(anchor.data()).for_each(|(x, a)| *x -= a);
        dists.push(d.norm_sq().sqrt());
    }
    let shown = dists.iter().map(|d| format!("{d:.3e}")).collect::<Vec<_>>().join(" ≥ ");
    ensure(dists.iter().all(|d| d.is_finite()), || {
        format!("non-finite distance: {dists:?}")
    })?;
    ensure(dists.windows(2).all(|p| p[1] <= p[0]), || {
        format!("not monotone: {shown}")
    })?;
    Ok(format!("‖Δŵ‖ over ε=1,10,1e3,1e6: {shown}"))
}

// Criteria 7 and 8

fn trend_config(dir: &Path, seed: u64, rounds: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = seed;
    c.align.pre_align_iters = 200;
    c.federation.mode = Mode::FedBiOT;
    c.federation.clients = 4;
    c.federation.local_steps = 30;
    c.federation.rounds = rounds;
    c.data.client_tasks = TaskKind::ALL.to_vec();
    c.data.public_tasks = vec![TaskKind::Copy, TaskKind::Reverse];
    c.data.public_overlap = false;
    c.data.partition = PartitionScheme::ByCategory;
    c.output.dir = dir.to_path_buf();
    c
}

fn emu_loss_at_init(c: &RunConfig) -> f64 {
    let prep = run::prepare(c, false).unwrap();
    let server = init_server(&prep.federation(), &c.lora).unwrap();
    let m = assemble(
        &prep.plan,
        &prep.base,
        &server.adapter,
        Some(&server.emulator),
        Assembly::AdapEmu,
    )
    .unwrap();
    evaluate(&m, &prep.data.eval, 50).unwrap().loss
}

fn end_to_end_trend() -> Check {
    let mut lines = Vec::new();
    let mut passed = 0;
    for seed in 0..3 {
        let tmp = tempfile::tempdir().unwrap();
        let c = trend_config(tmp.path(), seed, 50);
        let t = Instant::now();
        run::train(&c, false, true).map_err(|e| e.to_string())?;
        let init = emu_loss_at_init(&c);
        let pre = run::eval(
            tmp.path(),
            Assembly::AdapEmu,
            Some(&tmp.path().join(CKPT_DIR).join(PREALIGN_CKPT)),
            None,
        )
        .unwrap()
        .loss;
        let emu = run::eval(tmp.path(), Assembly::AdapEmu, None, None).unwrap().loss;
        let fu = run::eval(tmp.path(), Assembly::AdapFu, None, None).unwrap().loss;
        let ok = emu < init.min(pre) && fu <= emu;
        passed += ok as usize;
        lines.push(format!(
            "seed {seed}: AdapEmu {:.4} (init {init:.4}, pre-aligned {pre:.4}) AdapFu {fu:.4} {} [{:.0}s]",
            emu,
            if ok { "ok" } else { "miss" },
            t.elapsed().as_secs_f64()
        ));
    }
    let detail = lines.join("; ");
    ensure(passed >= 2, || format!("{passed}/3 seeds: {detail}"))?;
    Ok(format!("{passed}/3 seeds; {detail}"))
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let c = trend_config(tmp.path(), 0, 5);
    let mut runs = Vec::new();
    for _ in 0..2 {
        run::train(&c, true, true).map_err(|e| e.to_string())?;
        runs.push(std::fs::read(tmp.path().join(METRICS)).unwrap());
    }
    let lines = String::from_utf8_lossy(&runs[0]).lines().count();
    ensure(lines == 5, || format!("{lines} records for 5 rounds"))?;
    ensure(runs[0] == runs[1], || "metrics differ between identical runs".into())?;
    Ok(format!("two fresh R=5 runs: {} metric bytes identical", runs[0].len()))
}

// Criterion 9

fn fingerprint_base<T: Scalar>(b: &TransformerStack<T>) -> Vec<(String, Vec<u64>)> {
    b.named_arrays().into_iter().map(|(n, a)| (n, bits(a.data()))).collect()
}

fn fingerprint_lora<T: Scalar>(s: &LoraSet<T>) -> Vec<u64> {
    s.buffers().into_iter().flat_map(|b| bits(b)).collect()
}

fn frozen_audit() -> Check {
    let mut audited = Vec::new();
    for mode in Mode::ALL {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = RunConfig::default();
        c.pretrain.steps = 20;
        c.align.pre_align_iters = 5;
        c.align.per_round_iters = 3;
        c.federation.mode = mode;
        c.federation.local_steps = 5;
        c.federation.rounds = 3;
        c.federation.clients = if mode == Mode::OffsiteSingle { 1 } else { 4 };
        c.data.train_size = 120;
        c.data.pretrain_size = 200;
        c.output.dir = tmp.path().to_path_buf();
        let prep = run::prepare(&c, false).map_err(|e| e.to_string())?;
        let fed = prep.federation();
        let base_bits = fingerprint_base(&prep.base);
        ensure(
            base_bits.first().map(|n| n.0.as_str()) == Some("embedding")
                && base_bits.last().map(|n| n.0.as_str()) == Some("head"),
            || "base fingerprint misses embedding or head".into(),
        )?;
        let mut server = init_server(&fed, &c.lora).unwrap();
        let adapter_at_init = fingerprint_lora(&server.adapter);
        pre_align(&fed, &mut server).unwrap();
        ensure(fingerprint_lora(&server.adapter) == adapter_at_init, || {
            "pre-alignment moved the adapter".into()
        })?;
        let shards = partition(
            &prep.data.train,
            &PartitionSpec {
                scheme: c.data.partition,
                clients: c.federation.clients,
                seed: c.seed,
            },
        )
        .unwrap();
        let mut clients = init_clients(&fed, shards, &server).unwrap();
        for round in 0..c.federation.rounds {
            let adapter_in = fingerprint_lora(&server.adapter);
            server_align(&fed, &mut server).unwrap();
            ensure(fingerprint_lora(&server.adapter) == adapter_in, || {
                format!("round {round}: alignment moved the adapter")
            })?;
            let snap = broadcast(&server);
            let emulator_in = fingerprint_lora(&server.emulator);
            client_phase(&fed, &snap, &mut clients).unwrap();
            ensure(
                fingerprint_lora(&snap.emulator) == emulator_in && fingerprint_lora(&server.emulator) == emulator_in,
                || format!("{} round {round}: emulator changed during client phase", mode.name()),
            )?;
            server.adapter = server_aggregate(&fed, &clients).unwrap();
            server.round += 1;
            ensure(fingerprint_base(&prep.base) == base_bits, || {
                format!("{} round {round}: base changed", mode.name())
            })?;
        }
        // and through the full command path
        run::train(&c, false, true).map_err(|e| e.to_string())?;
        let reloaded = run::prepare(&c, false).map_err(|e| e.to_string())?;
        ensure(fingerprint_base(&reloaded.base) == base_bits, || {
            format!("{}: saved base differs", mode.name())
        })?;
        audited.push(mode.name());
    }
    Ok(format!(
        "base, embedding, head and client-phase emulator bit-identical ({})",
        audited.join(", ")
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("extraction oracle", extraction_oracle),
        ("cost table reproduction", cost_table),
        ("gradient correctness", gradient_check),
        ("identity invariants", identity_invariants),
        ("aggregation properties", aggregation_properties),
        ("proximal pinning", proximal_pinning),
        ("end-to-end trend", end_to_end_trend),
        ("determinism", determinism),
        ("frozen-parameter audit", frozen_audit),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
