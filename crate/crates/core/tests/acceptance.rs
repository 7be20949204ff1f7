//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

mod common;

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use common::{median, numeric_gradient, relative_error, report, FD_STEP, FD_TOLERANCE};
use fedadapter::adapter::{
    attention_forward, loss_and_gradients, AdapterConfig, AdapterParams, AdapterVars, ParamKind, PARAM_LAYOUT,
};
use fedadapter::cli::{execute, RunConfig};
use fedadapter::encoder::make_prototypes;
use fedadapter::federation::{
    broadcast_len, effective_params, partition_long_tail, prepare_clients, run_simulation, upload_len,
    FederationConfig, LoraConfig,
};
use fedadapter::gan::{
    discriminator_step_grads, generator_step_grads, one_hot, Discriminator, Generator, GeneratorLoss, Mlp, TargetRule,
};
use fedadapter::qlora::{
    dequantize, encode_delta, quantize_blockwise, DeltaTensor, LowRankDelta, Payload, Precision, WireMessage,
};
use fedadapter::rng;
use fedadapter::tensor::{Matrix, Tape};

fn gaussian64(rows: usize, cols: usize, r: &mut rng::Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

/// Smallest |pre-activation| over the hidden ReLU layers of `net` on `input`.
fn mlp_kink_margin(net: &Mlp<f64>, input: &Matrix<f64>) -> f64 {
    let mut a = input.clone();
    let mut margin = f64::INFINITY;
    for layer in &net.layers[..net.layers.len() - 1] {
        let z = a.matmul(&layer.w).unwrap().add_row(&layer.b).unwrap();
        margin = z.data().iter().fold(margin, |m, v| m.min(v.abs()));
        a = z.map(|v| v.max(0.0));
    }
    margin
}

/// Smallest |pre-activation| of the adapter's feed-forward ReLU on `x`.
fn adapter_kink_margin(p: &AdapterParams<f64>, x: &Matrix<f64>) -> f64 {
    let mut tape = Tape::new();
    let vars = AdapterVars::constants(&mut tape, p);
    let xv = tape.constant(x.clone());
    let a = attention_forward(&mut tape, &vars, xv).unwrap();
    let r1 = tape.add(a, xv).unwrap();
    let z = tape.value(r1).matmul(&p.w1).unwrap().add_row(&p.b1).unwrap();
    z.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Central differences are only meaningful where no ReLU input lies inside the
/// stencil; a step of `h` moves a pre-activation by at most `h * |input|` and
/// every input here is below 5 in magnitude.
const KINK_MARGIN: f64 = 5.0 * FD_STEP;

#[test]
fn c1_gradient_checks() {
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut redraws = 0usize;
    for seed in 0..5u64 {
        let cfg = AdapterConfig { dim: 8, d_ff: 12, quantize_logits: false, sym_text_loss: true, ..Default::default() };
        let protos = make_prototypes(4, cfg.dim, seed).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i % 4).collect();
        // The straight-through logit quantizer has no true derivative to compare against.
        let (params, x) = (0u64..)
            .map(|attempt| {
                let mut r = rng::derive(seed, 100, &[attempt]);
                let mut params: AdapterParams<f64> = AdapterParams::<f32>::init(&cfg, seed).cast();
                for t in params.tensors_mut() {
                    for v in t.data_mut() {
                        let n: f64 = StandardNormal.sample(&mut r);
                        *v += 0.05 * n;
                    }
                }
                (params, gaussian64(10, cfg.dim, &mut r))
            })
            .inspect(|_| redraws += 1)
            .find(|(p, x)| adapter_kink_margin(p, x) > KINK_MARGIN)
            .unwrap();
        redraws -= 1;
        let f = |p: &AdapterParams<f64>| loss_and_gradients(p, &x, &labels, &protos, &cfg).unwrap().0;
        let (_, grads) = loss_and_gradients(&params, &x, &labels, &protos, &cfg).unwrap();
        for k in 0..PARAM_LAYOUT.len() {
            let num = numeric_gradient(&params, |p| p.tensors_mut()[k], f, FD_STEP);
            let err = relative_error(grads.tensors()[k], &num);
            assert!(err < FD_TOLERANCE, "adapter {} seed {seed}: rel err {err:e}", PARAM_LAYOUT[k].0);
            worst = worst.max(err);
            checked += 1;
        }

        let (classes, dim, z_dim, hidden, batch) = (3, 5, 3, [6usize], 4);
        let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
        let cond: Matrix<f64> = one_hot(&labels, classes);
        let (g, d, real, fake, z) = (0u64..)
            .map(|attempt| {
                let mut r = rng::derive(seed, 101, &[attempt]);
                let mut g: Generator<f64> = Generator::init(z_dim, classes, dim, &hidden, &mut r);
                let mut d: Discriminator<f64> = Discriminator::init(classes, dim, &hidden, &mut r);
                for layer in g.net.layers.iter_mut().chain(d.net.layers.iter_mut()) {
                    layer.b.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
                }
                let real = gaussian64(batch, dim, &mut r);
                let fake = gaussian64(batch, dim, &mut r);
                let z = gaussian64(batch, z_dim, &mut r);
                (g, d, real, fake, z)
            })
            .inspect(|_| redraws += 1)
            .find(|(g, d, real, fake, z)| {
                let generated = g.apply(z, &labels).unwrap();
                [real, fake, &generated]
                    .iter()
                    .all(|x| mlp_kink_margin(&d.net, &x.concat_cols(&cond).unwrap()) > KINK_MARGIN)
                    && mlp_kink_margin(&g.net, &z.concat_cols(&cond).unwrap()) > KINK_MARGIN
            })
            .unwrap();
        redraws -= 1;
        let (_, dg) = discriminator_step_grads(&d, &real, &fake, &labels).unwrap();
        for k in 0..d.net.tensors().len() {
            let num = numeric_gradient(
                &d,
                |d| d.net.tensors_mut().swap_remove(k),
                |d| discriminator_step_grads(d, &real, &fake, &labels).unwrap().0,
                FD_STEP,
            );
            let err = relative_error(&dg[k], &num);
            assert!(err < FD_TOLERANCE, "discriminator tensor {k} seed {seed}: rel err {err:e}");
            worst = worst.max(err);
            checked += 1;
        }
        for mode in [GeneratorLoss::NonSaturating, GeneratorLoss::Paper] {
            let (_, gg) = generator_step_grads(&g, &d, &z, &labels, mode).unwrap();
            for k in 0..g.net.tensors().len() {
                let num = numeric_gradient(
                    &g,
                    |g| g.net.tensors_mut().swap_remove(k),
                    |g| generator_step_grads(g, &d, &z, &labels, mode).unwrap().0,
                    FD_STEP,
                );
                let err = relative_error(&gg[k], &num);
                assert!(err < FD_TOLERANCE, "generator tensor {k} ({mode:?}) seed {seed}: rel err {err:e}");
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    assert!(report(
        1,
        "gradient checks",
        true,
        &format!(
            "{checked} tensors over 5 seeds, worst rel err {worst:.2e} < {FD_TOLERANCE:e} (h = {FD_STEP:e}; {redraws} draws rejected for a ReLU input within {KINK_MARGIN} of 0)"
        )
    ));
}

#[test]
fn c2_quantizer_bounds_and_wire() {
    let mut r = rng::derive(7, 200, &[]);
    let mut worst_ratio: f64 = 0.0;
    for bits in [4u8, 8] {
        for _ in 0..1000 {
            let magnitude = 10f64.powf(r.random_range(-3.0..3.0));
            let x = Matrix::from_fn(1, 64, |_, _| (r.random_range(-1.0..1.0) * magnitude) as f32);
            let q = quantize_blockwise(&x, bits, 64).unwrap();
            let back = dequantize(&q).unwrap();
            let scale = q.scales()[0] as f64;
            let err = x.data().iter().zip(back.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).fold(0.0, f64::max);
            assert!(err <= scale / 2.0, "bits {bits}: error {err:e} exceeds scale/2 = {:e}", scale / 2.0);
            worst_ratio = worst_ratio.max(err / scale);
        }
    }

    let cfg = AdapterConfig { dim: 64, d_ff: 128, ..Default::default() };
    let params = AdapterParams::init(&cfg, 1);
    let mut dr = rng::derive(1, 201, &[]);
    let mut delta = LowRankDelta::init_for(&params, 4, 8.0, &mut dr);
    for e in &mut delta.entries {
        match &mut e.tensor {
            DeltaTensor::LowRank { b, .. } => *b = Matrix::from_fn(b.rows(), b.cols(), |_, _| dr.random_range(-0.1..0.1)),
            DeltaTensor::Dense(d) => *d = Matrix::from_fn(d.rows(), d.cols(), |_, _| dr.random_range(-0.1..0.1)),
        }
    }
    for precision in [Precision::Int4, Precision::Int8, Precision::F32] {
        let bytes = encode_delta(&delta, precision, 64).unwrap();
        let msg = WireMessage::decode(&bytes).unwrap();
        assert_eq!(msg.encode().unwrap(), bytes, "wire re-encode differs at {precision:?}");
        let direct = delta.to_wire(precision, 64).unwrap();
        assert_eq!(msg, direct, "decoded message differs at {precision:?}");
    }

    // Analytic payload sizes: 4-bit codes pack two per byte plus one f32 scale per 64 values.
    let numels: Vec<usize> = PARAM_LAYOUT
        .iter()
        .zip(params.tensors())
        .map(|(&(_, kind), m)| match kind {
            ParamKind::Matrix => 4 * (m.rows() + m.cols()),
            ParamKind::Dense => m.len(),
        })
        .collect();
    let dense_bytes: usize = numels.iter().map(|n| 4 * n).sum();
    let q4_bytes: usize = numels.iter().map(|n| n.div_ceil(2) + 4 * n.div_ceil(64)).sum();
    let msg = delta.to_wire(Precision::Int4, 64).unwrap();
    let measured: usize = msg
        .tensors
        .iter()
        .map(|t| match &t.payload {
            Payload::Quantized(q) => q.packed_codes().len() + 4 * q.scales().len(),
            Payload::Raw(v) => 4 * v.len(),
        })
        .sum();
    assert_eq!(measured, q4_bytes);
    let ratio = dense_bytes as f64 / q4_bytes as f64;
    let whole = encode_delta(&delta, Precision::F32, 64).unwrap().len() as f64
        / encode_delta(&delta, Precision::Int4, 64).unwrap().len() as f64;
    let pass = ratio >= 7.0;
    assert!(report(
        2,
        "quantizer bounds",
        pass,
        &format!(
            "2000 blocks, worst err/scale {worst_ratio:.4} <= 0.5; wire bit-exact; 4-bit payload {dense_bytes}/{q4_bytes} = {ratio:.3}x (whole message {whole:.3}x)"
        )
    ));
}

/// Three clients, one round, no augmentation.
fn one_round(lora: LoraConfig) -> (AdapterParams, Vec<fedadapter::federation::ClientState>, AdapterParams) {
    let adapter = AdapterConfig { dim: 12, d_ff: 16, ..Default::default() };
    let split = fedadapter::cli::make_toy_dataset(
        &fedadapter::cli::ToyDatasetSpec { num_classes: 4, samples_per_class: 40, raw_dim: 8, cluster_spread: 0.3, seed: 5 },
        adapter.dim,
    )
    .unwrap();
    let protos = make_prototypes(4, adapter.dim, 5).unwrap();
    let mut pr = rng::derive(5, rng::stream::PARTITION, &[]);
    let part = partition_long_tail(&split.train, 3, 1.0, 2.0, &mut pr).unwrap();
    let mut clients = prepare_clients(part.clients, None, 5, false, 1).unwrap();
    let cfg = FederationConfig { seed: 5, adapter: adapter.clone(), lora, ..Default::default() };
    let global = AdapterParams::init(&adapter, 5);
    let res = run_simulation(global.clone(), &mut clients, &protos, &split.test, &cfg, 1).unwrap();
    (global, clients, res.global)
}

/// Dense oracle: `Σ w_i (base + delta_i)` in f64 from each client's trained, unquantized delta.
fn dense_oracle(clients: &[fedadapter::federation::ClientState]) -> Vec<Vec<f64>> {
    let total: f64 = clients.iter().map(|c| c.m as f64).sum();
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for c in clients {
        let eff = effective_params(c).unwrap();
        let w = c.m as f64 / total;
        for (k, t) in eff.tensors().iter().enumerate() {
            if acc.len() <= k {
                acc.push(vec![0.0; t.len()]);
            }
            for (a, &v) in acc[k].iter_mut().zip(t.data()) {
                *a += w * v as f64;
            }
        }
    }
    acc
}

/// Per-element bound on the change a quantized round trip makes to the
/// effective update of every tensor of `delta`.
fn propagated_bound(delta: &LowRankDelta, bits: u8, block: usize, alpha: f64) -> Vec<Vec<f64>> {
    let level = ((1i32 << (bits - 1)) - 1) as f64;
    let elem_bounds = |values: &[f32]| -> Vec<f64> {
        values
            .chunks(block)
            .flat_map(|c| {
                let absmax = c.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
                let s = absmax / level;
                c.iter().map(move |&v| s / 2.0 + (v as f64).abs() * 2f64.powi(-23) + s * 2f64.powi(-23))
            })
            .collect()
    };
    delta
        .entries
        .iter()
        .map(|e| match &e.tensor {
            DeltaTensor::Dense(d) => elem_bounds(d.data()),
            DeltaTensor::LowRank { a, b } => {
                let flat: Vec<f32> = a.data().iter().chain(b.data()).copied().collect();
                let eb = elem_bounds(&flat);
                let (ea, eb) = eb.split_at(a.len());
                let (rows, rank, cols) = (a.rows(), a.cols(), b.cols());
                let s = alpha / rank as f64;
                let mut out = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        let mut t = 0.0;
                        for k in 0..rank {
                            let (av, bv) = (a.get(i, k).abs() as f64, b.get(k, j).abs() as f64);
                            let (ae, be) = (ea[i * rank + k], eb[k * cols + j]);
                            t += ae * bv + av * be + ae * be;
                        }
                        out[i * cols + j] = s * t;
                    }
                }
                out
            }
        })
        .collect()
}

#[test]
fn c3_fedavg_oracle() {
    let exact = LoraConfig { rank: 64, bits: 32, ..Default::default() };
    let (_, clients, global) = one_round(exact);
    let oracle = dense_oracle(&clients);
    let mut dev_exact: f64 = 0.0;
    for (t, o) in global.tensors().iter().zip(&oracle) {
        for (&v, &w) in t.data().iter().zip(o) {
            dev_exact = dev_exact.max((v as f64 - w).abs());
        }
    }

    let q4 = LoraConfig { bits: 4, ..Default::default() };
    let (alpha, block) = (q4.alpha() as f64, q4.block_size);
    let (_, clients, global) = one_round(q4);
    let oracle = dense_oracle(&clients);
    let total: f64 = clients.iter().map(|c| c.m as f64).sum();
    let mut bound: Vec<Vec<f64>> = oracle.iter().map(|o| vec![0.0; o.len()]).collect();
    for c in &clients {
        let w = c.m as f64 / total;
        for (slot, e) in propagated_bound(&c.delta, 4, block, alpha).iter().zip(&c.delta.entries) {
            let k = PARAM_LAYOUT.iter().position(|(n, _)| *n == e.name).unwrap();
            for (dst, v) in bound[k].iter_mut().zip(slot) {
                *dst += w * v;
            }
        }
    }
    let (mut worst_excess, mut max_dev, mut max_bound) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for ((t, o), bnd) in global.tensors().iter().zip(&oracle).zip(&bound) {
        for ((&v, &w), &b) in t.data().iter().zip(o).zip(bnd) {
            let dev = (v as f64 - w).abs();
            worst_excess = worst_excess.max(dev - (b + 1e-6));
            max_dev = max_dev.max(dev);
            max_bound = max_bound.max(b);
        }
    }
    let pass = dev_exact <= 1e-6 && worst_excess <= 0.0;
    assert!(report(
        3,
        "fedavg oracle",
        pass,
        &format!(
            "32-bit full rank max dev {dev_exact:.2e} <= 1e-6; 4-bit max dev {max_dev:.2e} within propagated bound (max {max_bound:.2e})"
        )
    ));
}

/// Long-tail toy setup shared by the benefit and scalability checks.
fn long_tail_config(seed: u64, gan: bool, clients: usize) -> RunConfig {
    let mut cfg = RunConfig { seed, n_clients: clients, threads: 0, ..Default::default() };
    cfg.dataset.cluster_spread = 0.4;
    cfg.gan.enabled = gan;
    cfg.gan.lr = 1e-3;
    cfg.gan.policy = TargetRule::Fixed(120);
    cfg
}

fn tail_recall(recall: &[f64]) -> f64 {
    let half = recall.len() / 2;
    recall[half..].iter().sum::<f64>() / (recall.len() - half) as f64
}

#[test]
fn c4_long_tail_benefit() {
    let start = Instant::now();
    let (mut tail_on, mut tail_off, mut acc_on, mut acc_off) = (vec![], vec![], vec![], vec![]);
    for seed in 0..5 {
        for gan in [false, true] {
            let s = execute(&long_tail_config(seed, gan, 5)).unwrap().result.summary;
            let (t, a) = if gan { (&mut tail_on, &mut acc_on) } else { (&mut tail_off, &mut acc_off) };
            t.push(tail_recall(&s.per_class_recall));
            a.push(s.final_accuracy);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (t_on, t_off, a_on, a_off) = (median(tail_on), median(tail_off), median(acc_on), median(acc_off));
    let gain = t_on - t_off;
    let pass = gain >= 0.10 && a_on >= a_off && secs < 600.0;
    assert!(report(
        4,
        "long-tail benefit",
        pass,
        &format!(
            "median tail recall {t_on:.4} vs {t_off:.4} (+{:.2} points >= 10); accuracy {a_on:.4} vs {a_off:.4}; {secs:.0}s for 10 runs",
            gain * 100.0
        )
    ));
}

#[test]
fn c5_convergence() {
    let mut cfg = RunConfig { threads: 0, ..Default::default() };
    cfg.gan.enabled = false;
    let out = execute(&cfg).unwrap();
    let reports = &out.result.reports;
    let acc: Vec<f64> = reports.iter().map(|r| r.server_accuracy).collect();
    let loss: Vec<f64> = reports.iter().map(|r| r.train_loss).collect();
    let trailing: Vec<f64> = (9..50).map(|t| loss[t - 9..=t].iter().sum::<f64>() / 10.0).collect();
    let violations: Vec<usize> = (1..trailing.len()).filter(|&i| trailing[i] >= trailing[i - 1]).map(|i| i + 9).collect();
    let first = acc.iter().position(|&a| a >= 0.90);
    let pass = reports.len() == 100 && first.is_some() && violations.is_empty();
    assert!(report(
        5,
        "convergence",
        pass,
        &format!(
            "accuracy >= 0.90 first at round {first:?}, final {:.4}; trailing-10 train loss strictly decreasing over rounds 9..49 (violations {violations:?})",
            acc.last().copied().unwrap_or(0.0)
        )
    ));
}

#[test]
fn c6_scalability() {
    let (mut five, mut ten) = (vec![], vec![]);
    for seed in 0..3 {
        five.push(execute(&long_tail_config(seed, true, 5)).unwrap().result.summary.final_accuracy);
        ten.push(execute(&long_tail_config(seed, true, 10)).unwrap().result.summary.final_accuracy);
    }
    let (m5, m10) = (median(five.clone()), median(ten.clone()));
    let pass = (m10 - m5).abs() <= 0.02;
    assert!(report(
        6,
        "scalability",
        pass,
        &format!("median final accuracy 10 clients {m10:.4} vs 5 clients {m5:.4} (|diff| {:.4} <= 0.02); {five:?} {ten:?}", (m10 - m5).abs())
    ));
}

#[test]
fn c7_communication_accounting() {
    let cfg = RunConfig { rounds: 20, threads: 0, ..Default::default() };
    let out = execute(&cfg).unwrap();
    let s = &out.result.summary;
    let (d, f, r) = (cfg.adapter.dim, cfg.adapter.d_ff, cfg.lora.rank);
    // Names, shapes and value counts per tensor, written out by hand.
    let layout: [(&str, usize, usize, bool); 10] = [
        ("wq", d, d, true),
        ("wk", d, d, true),
        ("wv", d, d, true),
        ("w1", d, f, true),
        ("b1", 1, f, false),
        ("w2", f, d, true),
        ("b2", 1, d, false),
        ("wg", d, d, true),
        ("bg", 1, d, false),
        ("log_s", 1, 1, false),
    ];
    let header = 4 + 4 + 1 + 4 + 4;
    let per_tensor = |name: &str| 2 + 4 + 4 + 4 + name.len();
    let dense: usize =
        header + layout.iter().map(|&(n, rows, cols, _)| per_tensor(n) + 4 * rows * cols).sum::<usize>();
    let q4: usize = header
        + layout
            .iter()
            .map(|&(n, rows, cols, low)| {
                let values = if low { r.min(rows).min(cols) * (rows + cols) } else { rows * cols };
                per_tensor(n) + values.div_ceil(2) + 4 * values.div_ceil(cfg.lora.block_size)
            })
            .sum::<usize>();
    let fed = cfg.federation_config();
    assert_eq!(broadcast_len(&fed.adapter), dense);
    assert_eq!(upload_len(&fed.adapter, r, Precision::Int4, cfg.lora.block_size), q4);
    let uploads = (cfg.rounds * cfg.n_clients) as u64;
    let exact = s.cumulative_bytes_up == uploads * q4 as u64
        && s.cumulative_bytes_down == uploads * dense as u64
        && s.dense_upload_baseline_bytes == uploads * dense as u64
        && out.result.reports.iter().all(|rep| rep.clients.iter().all(|c| c.bytes_up == q4 as u64));
    let frac = s.cumulative_bytes_up as f64 / s.dense_upload_baseline_bytes as f64;
    let pass = exact && frac < 0.15;
    assert!(report(
        7,
        "communication accounting",
        pass,
        &format!(
            "uplink {} B = {uploads} x {q4}; dense baseline {} B = {uploads} x {dense}; ratio {:.2}% < 15%",
            s.cumulative_bytes_up,
            s.dense_upload_baseline_bytes,
            frac * 100.0
        )
    ));
}

#[test]
fn c8_determinism() {
    let mut a = RunConfig { rounds: 15, ..Default::default() };
    a.gan.epochs = 40;
    let mut b = a.clone();
    b.seed = 3;
    b.participation = 0.6;
    b.lora.bits = 8;
    b.train.local_epochs = 2;
    let mut same = true;
    let mut lens = vec![];
    for cfg in [a, b] {
        let runs: Vec<String> = [1usize, 4, 1]
            .iter()
            .map(|&t| execute(&RunConfig { threads: t, ..cfg.clone() }).unwrap().metrics)
            .collect();
        same &= runs.iter().all(|m| m == &runs[0]);
        lens.push(runs[0].len());
    }
    assert!(report(
        8,
        "determinism",
        same,
        &format!("two configurations, threads 1/4/1: metrics streams byte-identical ({lens:?} bytes)")
    ));
}
