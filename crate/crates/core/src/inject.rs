//! Per-layer injection of the aligned MAE condition into a frozen denoiser:
//! task prompts, LoRA-adapted condition projections and sigmoid gates.

use serde::{Deserialize, Serialize};

use crate::align::{sample_case, AlignmentModule, Frozen, PriorCorpus, PriorSchedule, TraceRow};
use crate::error::{AsukaError, Result};
use crate::models::denoiser::{DenoiseInput, DenoiseOutput, ToyDenoiser};
use crate::models::MaePrior;
use crate::nn::layers::{pos_embed_2d, Linear};
use crate::nn::optim::{accumulate, clip_grad_norm, scale_all, AdamW};
use crate::nn::{Graph, Mat, ParamId, ParamStore, Params, Var};
use crate::rng::{seeded, ChaCha8Rng};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectConfig {
    pub rank: usize,
    pub lora_scale: f64,
    pub gate_bias: f64,
}

impl Default for InjectConfig {
    fn default() -> Self {
        Self { rank: 8, lora_scale: 1.0, gate_bias: -4.0 }
    }
}

/// Low-rank update `ΔW = scale · down · up` (row-vector convention, `x · W`).
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
    pub rank: usize,
}

impl LoraAdapter {
    fn new(store: &mut ParamStore, name: &str, dim: usize, rank: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let down = store.add(format!("{name}.down"), Mat::randn(dim, rank, 1.0 / (dim as f64).sqrt(), rng));
        let up = store.add(format!("{name}.up"), Mat::zeros(rank, dim));
        Self { down, up, scale, rank }
    }

    pub fn delta(&self, store: &ParamStore) -> Mat {
        store.get(self.down).matmul(store.get(self.up)).scale(self.scale)
    }
}

/// Forcing of the gate outputs, for ablations and no-op checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateOverride {
    #[default]
    Learned,
    /// Gate output multiplied by zero.
    Closed,
    /// Gate output replaced by ones.
    Open,
}

/// Tape handles for one layer's adapters and gates, `[q, k, v]` order.
#[derive(Clone, Copy)]
pub struct LayerVars<'g> {
    pub down: [Var<'g>; 3],
    pub up: [Var<'g>; 3],
    pub scale: f64,
    pub gate_w: [Var<'g>; 3],
    pub gate_b: [Var<'g>; 3],
}

/// Fused condition features for one layer:
/// `f_j = f_task·W_j + G_j(f_mae + f_task) ⊙ (f_mae·(W_j + ΔW_j))`.
pub fn fuse_condition<'g>(
    f_task: Var<'g>,
    f_mae: Var<'g>,
    w: [Var<'g>; 3],
    layer: &LayerVars<'g>,
    gate: GateOverride,
) -> Result<[Var<'g>; 3]> {
    if f_task.shape() != f_mae.shape() {
        return Err(AsukaError::arg(format!(
            "task tokens {:?} and MAE condition {:?} must have the same shape",
            f_task.shape(),
            f_mae.shape()
        )));
    }
    for wj in &w {
        if wj.rows() != f_task.cols() {
            return Err(AsukaError::arg(format!("projection with {} rows for width {}", wj.rows(), f_task.cols())));
        }
    }
    Ok(fuse_unchecked(f_task, f_mae, w, layer, gate))
}

fn fuse_unchecked<'g>(f_task: Var<'g>, f_mae: Var<'g>, w: [Var<'g>; 3], l: &LayerVars<'g>, gate: GateOverride) -> [Var<'g>; 3] {
    let g = f_task.graph();
    let gate_in = f_mae.add(f_task);
    std::array::from_fn(|j| {
        let task_j = f_task.matmul(w[j]);
        let mae_j = f_mae.matmul(w[j]).add(f_mae.matmul(l.down[j]).matmul(l.up[j]).scale(l.scale));
        let gj = match gate {
            GateOverride::Learned => gate_in.matmul(l.gate_w[j]).add_row(l.gate_b[j]).sigmoid(),
            GateOverride::Closed => gate_in.matmul(l.gate_w[j]).add_row(l.gate_b[j]).sigmoid().scale(0.0),
            GateOverride::Open => g.constant(Mat::full(f_task.rows(), f_task.cols(), 1.0)),
        };
        task_j.add(gj.mul(mae_j))
    })
}

/// `S = R_img / R_mae` with `P` MAE patches per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionalScaling {
    pub s: f64,
    pub patches: usize,
}

impl PositionalScaling {
    /// Both resolutions in tokens per axis; `P = R_mae`.
    pub fn from_resolutions(r_img: usize, r_mae: usize) -> Result<Self> {
        if r_mae == 0 {
            return Err(AsukaError::arg("MAE grid resolution must be positive"));
        }
        Ok(Self { s: r_img as f64 / r_mae as f64, patches: r_mae })
    }
}

/// Row-major `(r·S, c·S)` for `0 ≤ r, c ≤ P − 1`.
pub fn scaled_pos_ids(ps: PositionalScaling) -> Result<Vec<(f64, f64)>> {
    if !(ps.s > 0.0 && ps.s.is_finite()) {
        return Err(AsukaError::arg(format!("positional scale must be positive, got {}", ps.s)));
    }
    if ps.patches == 0 {
        return Err(AsukaError::arg("at least one patch per axis is required"));
    }
    let p = ps.patches;
    Ok((0..p).flat_map(|r| (0..p).map(move |c| (r as f64 * ps.s, c as f64 * ps.s))).collect())
}

#[derive(Clone, Debug)]
struct LayerParams {
    adapters: [LoraAdapter; 3],
    gates: [Linear; 3],
}

/// Adapters, gates and task prompt for every layer of one denoiser, plus the
/// alignment module that produces the shared MAE condition.
#[derive(Clone, Debug)]
pub struct InjectionModule {
    pub cfg: InjectConfig,
    pub store: ParamStore,
    pub align: AlignmentModule,
    layers: Vec<LayerParams>,
    prompt: ParamId,
    width: usize,
}

impl InjectionModule {
    /// The task prompt starts at the base model's null condition so that a
    /// closed-gate model reproduces the base exactly.
    pub fn new(base: &ToyDenoiser, align: AlignmentModule, cfg: InjectConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = base.cfg.width;
        if align.cfg.out_dim != w {
            return Err(AsukaError::Config(format!("alignment width {} vs denoiser width {w}", align.cfg.out_dim)));
        }
        if cfg.rank == 0 || cfg.rank > w {
            return Err(AsukaError::Config(format!("LoRA rank {} outside 1..={w}", cfg.rank)));
        }
        let mut store = ParamStore::new();
        let layers = (0..base.layers.len())
            .map(|i| {
                let n = |x: &str| format!("inject.layer{i}.{x}");
                let adapters = ["q", "k", "v"].map(|j| LoraAdapter::new(&mut store, &n(&format!("lora_{j}")), w, cfg.rank, cfg.lora_scale, rng));
                let gates = ["q", "k", "v"].map(|j| {
                    let lin = Linear::zeros(&mut store, &n(&format!("gate_{j}")), w, w, true);
                    store.set(lin.b.expect("gate has a bias"), Mat::full(1, w, cfg.gate_bias));
                    lin
                });
                LayerParams { adapters, gates }
            })
            .collect();
        let prompt = store.add("inject.task_prompt", base.null_ctx().clone());
        Ok(Self { cfg, store, align, layers, prompt, width: w })
    }

    pub fn from_stores(base: &ToyDenoiser, align: AlignmentModule, cfg: InjectConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(base, align, cfg, &mut seeded(0))?;
        if m.store.len() != store.len() || m.store.load_matching(&store) != store.len() {
            return Err(AsukaError::Checkpoint("injection checkpoint does not match the configuration".into()));
        }
        Ok(m)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn task_tokens(&self) -> usize {
        self.store.get(self.prompt).rows
    }

    /// `ΔW_j` of layer `i`, `j ∈ {0: q, 1: k, 2: v}`.
    pub fn delta_w(&self, layer: usize, j: usize) -> Mat {
        self.layers[layer].adapters[j].delta(&self.store)
    }

    pub fn prompt_var<'g>(&self, p: &Params<'g>) -> Var<'g> {
        p.v(self.prompt)
    }

    pub fn layer_vars<'g>(&self, p: &Params<'g>, i: usize) -> LayerVars<'g> {
        let l = &self.layers[i];
        LayerVars {
            down: std::array::from_fn(|j| p.v(l.adapters[j].down)),
            up: std::array::from_fn(|j| p.v(l.adapters[j].up)),
            scale: l.adapters[0].scale,
            gate_w: std::array::from_fn(|j| p.v(l.gates[j].w)),
            gate_b: std::array::from_fn(|j| p.v(l.gates[j].b.expect("gate has a bias"))),
        }
    }

    /// Gate outputs of layer `i` for given inputs (eval mode).
    pub fn gate_values(&self, i: usize, f_mae: &Mat, f_task: &Mat) -> [Mat; 3] {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let lv = self.layer_vars(&p, i);
        let x = g.constant(f_mae.clone()).add(g.constant(f_task.clone()));
        std::array::from_fn(|j| x.matmul(lv.gate_w[j]).add_row(lv.gate_b[j]).sigmoid().to_mat())
    }

    /// `f_mae = align(prior) + PE(scaled IDs)`, `N_m × M_s`.
    pub fn mae_condition<'g>(&self, g: &'g Graph, pa: &Params<'g>, prior: &MaePrior, latent_grid: (usize, usize)) -> Result<Var<'g>> {
        let (pr, pc) = prior.grid;
        if pr != pc || latent_grid.0 != latent_grid.1 {
            return Err(AsukaError::arg(format!("square grids required, got prior {:?} and latent {:?}", prior.grid, latent_grid)));
        }
        let ps = PositionalScaling::from_resolutions(latent_grid.0, pr)?;
        let pos = pos_embed_2d(&scaled_pos_ids(ps)?, self.width);
        Ok(self.align.forward(pa, g.constant(prior.tokens.clone()))?.add(g.constant(pos)))
    }

    /// Injected forward pass through the frozen `base`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        base: &ToyDenoiser,
        pg: &Params<'g>,
        pi: &Params<'g>,
        pa: &Params<'g>,
        inp: &DenoiseInput,
        prior: &MaePrior,
        gate: GateOverride,
    ) -> Result<DenoiseOutput<'g>> {
        if base.layers.len() != self.layers.len() || base.cfg.width != self.width {
            return Err(AsukaError::Config(format!(
                "injection built for {} layers of width {}, denoiser has {} of width {}",
                self.layers.len(),
                self.width,
                base.layers.len(),
                base.cfg.width
            )));
        }
        let f_mae = self.mae_condition(g, pa, prior, inp.grid)?;
        let prompt = self.prompt_var(pi);
        if f_mae.shape() != prompt.shape() {
            return Err(AsukaError::arg(format!(
                "MAE condition {:?} must match the task prompt {:?}",
                f_mae.shape(),
                prompt.shape()
            )));
        }
        let vars: Vec<LayerVars<'g>> = (0..self.layers.len()).map(|i| self.layer_vars(pi, i)).collect();
        let hook = |i: usize, f_task: Var<'g>, w: [Var<'g>; 3]| fuse_unchecked(f_task, f_mae, w, &vars[i], gate);
        base.forward(g, pg, inp, prompt, base.cfg.mode, Some(&hook))
    }

    pub fn predict(&self, base: &ToyDenoiser, inp: &DenoiseInput, prior: &MaePrior, gate: GateOverride) -> Result<Mat> {
        let g = Graph::new();
        let pg = base.store.bind(&g, false);
        let pi = self.store.bind(&g, false);
        let pa = self.align.store.bind(&g, false);
        Ok(self.forward(&g, base, &pg, &pi, &pa, inp, prior, gate)?.out.to_mat())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mae_mask_ratio: f64,
    pub prior: PriorSchedule,
}

impl Default for InjectTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 4, lr: 2e-3, weight_decay: 1e-4, mae_mask_ratio: 0.75, prior: PriorSchedule::default() }
    }
}

/// Trains adapters, gates, prompt and alignment through the frozen backbone.
pub fn train_inject(
    module: &mut InjectionModule,
    frozen: &Frozen<'_>,
    data: &PriorCorpus,
    schedule: &NoiseSchedule,
    cfg: &InjectTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TraceRow>> {
    let before = frozen.digests();
    let mut opt_i = AdamW::new(&module.store, cfg.weight_decay);
    let mut opt_a = AdamW::new(&module.align.store, cfg.weight_decay);
    let n_inject = module.store.len();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc = None;
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let case = sample_case(frozen, data, schedule, &cfg.prior, cfg.mae_mask_ratio, step, rng)?;
            let g = Graph::new();
            let pg = frozen.generator.store.bind(&g, false);
            let pi = module.store.bind(&g, true);
            let pa = module.align.store.bind(&g, true);
            let out = module.forward(&g, frozen.generator, &pg, &pi, &pa, &case.example.input, &case.prior, GateOverride::Learned)?.out;
            let loss = out.sub(g.constant(case.example.target)).square().mean();
            total += loss.scalar();
            let grads = g.backward(loss);
            let mut all = pi.grads(&grads);
            all.extend(pa.grads(&grads));
            accumulate(&mut acc, all);
        }
        let mut grads = acc.expect("batch is non-empty");
        scale_all(&mut grads, 1.0 / cfg.batch as f64);
        clip_grad_norm(&mut grads, 1.0);
        let align_grads = grads.split_off(n_inject);
        opt_i.step(&mut module.store, &grads, cfg.lr);
        opt_a.step(&mut module.align.store, &align_grads, cfg.lr);
        trace.push(TraceRow { step, loss: total / cfg.batch as f64, p: cfg.prior.p(step), lr: cfg.lr });
    }
    frozen.verify(&before)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignConfig;
    use crate::models::denoiser::DenoiserConfig;
    use crate::models::{CondMode, PriorSource};
    use proptest::{prop_assert, proptest};

    fn small_base(mode: CondMode, seed: u64) -> ToyDenoiser {
        let cfg = DenoiserConfig { width: 8, layers: 2, heads: 2, mlp_ratio: 2, ctx_tokens: 4, mode, ..DenoiserConfig::default() };
        ToyDenoiser::new(cfg, &mut seeded(seed))
    }

    fn small_module(base: &ToyDenoiser, rng: &mut ChaCha8Rng) -> InjectionModule {
        let acfg = AlignConfig { in_dim: 6, out_dim: 8, blocks: 1, heads: 2, mlp_ratio: 2 };
        let align = AlignmentModule::new(acfg, "align", rng);
        InjectionModule::new(base, align, InjectConfig { rank: 2, ..InjectConfig::default() }, rng).unwrap()
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for v in store.values_mut() {
            *v = Mat::randn(v.rows, v.cols, 0.5, rng);
        }
    }

    fn small_input(rng: &mut ChaCha8Rng) -> (DenoiseInput, MaePrior) {
        let grid = (4, 4);
        let inp = DenoiseInput {
            z_t: Mat::randn(16, 4, 1.0, rng),
            z_masked: Mat::randn(16, 4, 1.0, rng),
            mask: Mat::from_fn(16, 1, |r, _| (r % 3 == 0) as u8 as f64),
            t: 37,
            grid,
        };
        let prior = MaePrior { tokens: Mat::randn(4, 6, 1.0, rng), patch_size: 16, grid: (2, 2), source: PriorSource::Predicted };
        (inp, prior)
    }

    /// Direct evaluation of the three equations on plain matrices.
    fn straight_line(f_task: &Mat, f_mae: &Mat, w: &[Mat; 3], dw: &[Mat; 3], gw: &[Mat; 3], gb: &[Mat; 3]) -> [Mat; 3] {
        let (n, d) = f_task.shape();
        std::array::from_fn(|j| {
            Mat::from_fn(n, d, |r, c| {
                let mut task = 0.0;
                let mut mae = 0.0;
                let mut pre = gb[j].get(0, c);
                for k in 0..d {
                    task += f_task.get(r, k) * w[j].get(k, c);
                    mae += f_mae.get(r, k) * (w[j].get(k, c) + dw[j].get(k, c));
                    pre += (f_mae.get(r, k) + f_task.get(r, k)) * gw[j].get(k, c);
                }
                task + mae / (1.0 + (-pre).exp())
            })
        })
    }

    #[test]
    fn fusion_matches_straight_line_evaluation() {
        for seed in 0..50u64 {
            let mut rng = seeded(900 + seed);
            let (n, d, r) = (3, 8, 2);
            let f_task = Mat::randn(n, d, 1.0, &mut rng);
            let f_mae = Mat::randn(n, d, 1.0, &mut rng);
            let w: [Mat; 3] = std::array::from_fn(|_| Mat::randn(d, d, 0.5, &mut rng));
            let down: [Mat; 3] = std::array::from_fn(|_| Mat::randn(d, r, 0.5, &mut rng));
            let up: [Mat; 3] = std::array::from_fn(|_| Mat::randn(r, d, 0.5, &mut rng));
            let gw: [Mat; 3] = std::array::from_fn(|_| Mat::randn(d, d, 0.5, &mut rng));
            let gb: [Mat; 3] = std::array::from_fn(|_| Mat::randn(1, d, 0.5, &mut rng));
            let scale = 0.7;
            let dw: [Mat; 3] = std::array::from_fn(|j| {
                Mat::from_fn(d, d, |a, b| scale * (0..r).map(|k| down[j].get(a, k) * up[j].get(k, b)).sum::<f64>())
            });
            let g = Graph::new();
            let c = |m: &Mat| g.constant(m.clone());
            let lv = LayerVars {
                down: std::array::from_fn(|j| c(&down[j])),
                up: std::array::from_fn(|j| c(&up[j])),
                scale,
                gate_w: std::array::from_fn(|j| c(&gw[j])),
                gate_b: std::array::from_fn(|j| c(&gb[j])),
            };
            let got = fuse_condition(c(&f_task), c(&f_mae), std::array::from_fn(|j| c(&w[j])), &lv, GateOverride::Learned).unwrap();
            let want = straight_line(&f_task, &f_mae, &w, &dw, &gw, &gb);
            for j in 0..3 {
                assert!(got[j].to_mat().max_abs_diff(&want[j]) < 1e-10, "seed {seed} j {j}");
            }
        }
    }

    #[test]
    fn open_gate_hand_example() {
        // 2 tokens, width 4, ΔW = 0, W = identity scaled by 2.
        let g = Graph::new();
        let f_task = Mat::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let f_mae = Mat::from_vec(2, 4, vec![0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, -1.0]);
        let w = Mat::from_fn(4, 4, |r, c| if r == c { 2.0 } else { 0.0 });
        let z = |r, c| g.constant(Mat::zeros(r, c));
        let lv = LayerVars { down: [z(4, 1); 3], up: [z(1, 4); 3], scale: 1.0, gate_w: [z(4, 4); 3], gate_b: [z(1, 4); 3] };
        let wv = g.constant(w);
        let out = fuse_condition(g.constant(f_task), g.constant(f_mae), [wv; 3], &lv, GateOverride::Open).unwrap();
        assert_eq!(out[1].to_mat().data, vec![2.0, 0.0, 6.0, 0.0, 0.0, 2.0, 0.0, -2.0]);
    }

    #[test]
    fn fusion_rejects_mismatched_widths() {
        let g = Graph::new();
        let z = |r, c| g.constant(Mat::zeros(r, c));
        let lv = LayerVars { down: [z(4, 1); 3], up: [z(1, 4); 3], scale: 1.0, gate_w: [z(4, 4); 3], gate_b: [z(1, 4); 3] };
        assert!(matches!(fuse_condition(z(2, 4), z(2, 5), [z(4, 4); 3], &lv, GateOverride::Learned), Err(AsukaError::InvalidArgument(_))));
        assert!(fuse_condition(z(2, 4), z(3, 4), [z(4, 4); 3], &lv, GateOverride::Learned).is_err());
    }

    #[test]
    fn closed_gates_reproduce_the_base_model() {
        for mode in [CondMode::Cross, CondMode::Joint] {
            let base = small_base(mode, 11);
            let mut rng = seeded(12);
            let mut module = small_module(&base, &mut rng);
            // Everything except the prompt random, so the closed gate is doing the work.
            let prompt = module.store.get(module.prompt).clone();
            randomize(&mut module.store, &mut rng);
            module.store.set(module.prompt, prompt);
            for _ in 0..20 {
                let (inp, prior) = small_input(&mut rng);
                let want = base.predict_with(&inp, base.null_ctx(), mode).unwrap();
                let got = module.predict(&base, &inp, &prior, GateOverride::Closed).unwrap();
                assert_eq!(got.data, want.data);
                let open = module.predict(&base, &inp, &prior, GateOverride::Learned).unwrap();
                assert!(open.max_abs_diff(&want) > 1e-6);
            }
        }
    }

    #[test]
    fn key_token_counts_are_unchanged() {
        let base = small_base(CondMode::Joint, 3);
        let mut rng = seeded(4);
        let module = small_module(&base, &mut rng);
        let (inp, prior) = small_input(&mut rng);
        let g = Graph::new();
        let pg = base.store.bind(&g, false);
        let plain = base.forward(&g, &pg, &inp, base.null_ctx_var(&pg), CondMode::Joint, None).unwrap();
        let pi = module.store.bind(&g, false);
        let pa = module.align.store.bind(&g, false);
        let inj = module.forward(&g, &base, &pg, &pi, &pa, &inp, &prior, GateOverride::Learned).unwrap();
        assert_eq!(plain.key_tokens, inj.key_tokens);
        assert_eq!(inj.key_tokens, vec![20, 20]);
    }

    fn numeric_rank(m: &Mat) -> usize {
        // Gaussian elimination with full pivoting.
        let mut a = m.clone();
        let tol = 1e-10 * a.max_abs().max(1.0);
        let mut rank = 0;
        let (rows, cols) = a.shape();
        for _ in 0..rows.min(cols) {
            let mut best = (0, 0, 0.0);
            for r in rank..rows {
                for c in rank..cols {
                    if a.get(r, c).abs() > best.2 {
                        best = (r, c, a.get(r, c).abs());
                    }
                }
            }
            if best.2 <= tol {
                break;
            }
            for c in 0..cols {
                let t = a.get(rank, c);
                a.set(rank, c, a.get(best.0, c));
                a.set(best.0, c, t);
            }
            for r in 0..rows {
                let t = a.get(r, rank);
                a.set(r, rank, a.get(r, best.1));
                a.set(r, best.1, t);
            }
            let piv = a.get(rank, rank);
            for r in rank + 1..rows {
                let f = a.get(r, rank) / piv;
                for c in rank..cols {
                    a.set(r, c, a.get(r, c) - f * a.get(rank, c));
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn adapter_updates_have_bounded_rank() {
        let base = ToyDenoiser::new(DenoiserConfig { width: 32, layers: 2, heads: 2, ..DenoiserConfig::default() }, &mut seeded(5));
        let mut rng = seeded(6);
        let align = AlignmentModule::new(AlignConfig { out_dim: 32, blocks: 0, ..AlignConfig::default() }, "align", &mut rng);
        let mut module = InjectionModule::new(&base, align, InjectConfig::default(), &mut rng).unwrap();
        assert_eq!(numeric_rank(&module.delta_w(0, 0)), 0);
        randomize(&mut module.store, &mut rng);
        for i in 0..2 {
            for j in 0..3 {
                let r = numeric_rank(&module.delta_w(i, j));
                assert_eq!(r, 8);
            }
        }
        assert_eq!(numeric_rank(&Mat::randn(32, 32, 1.0, &mut rng)), 32);
    }

    #[test]
    fn gates_start_near_closed() {
        let base = small_base(CondMode::Cross, 7);
        let mut rng = seeded(8);
        let module = small_module(&base, &mut rng);
        let x = Mat::randn(4, 8, 1.0, &mut rng);
        for gv in module.gate_values(0, &x, &x) {
            assert!(gv.data.iter().all(|&v| (v - 1.0 / (1.0 + 4f64.exp())).abs() < 1e-15));
        }
    }

    proptest! {
        #[test]
        fn gate_outputs_stay_in_open_interval(seed in 0u64..500, amp in 0.0f64..2.0) {
            // f64 sigmoid rounds to 1.0 above ~36.7; inputs here keep pre-activations well below that.
            let base = small_base(CondMode::Cross, 9);
            let mut rng = seeded(seed);
            let mut module = small_module(&base, &mut rng);
            randomize(&mut module.store, &mut rng);
            let a = Mat::randn(4, 8, amp, &mut rng);
            let b = Mat::randn(4, 8, amp, &mut rng);
            for gv in module.gate_values(1, &a, &b) {
                prop_assert!(gv.data.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }

        #[test]
        fn scaled_ids_form_a_monotone_grid(p in 1usize..12, s in 0.25f64..8.0) {
            let ids = scaled_pos_ids(PositionalScaling { s, patches: p }).unwrap();
            prop_assert!(ids.len() == p * p);
            for (k, &(y, x)) in ids.iter().enumerate() {
                prop_assert!(y >= 0.0 && x >= 0.0);
                if k % p > 0 {
                    prop_assert!(x > ids[k - 1].1 && y == ids[k - 1].0);
                }
                if k >= p {
                    prop_assert!(y > ids[k - p].0);
                }
            }
        }
    }

    #[test]
    fn positional_scaling_examples() {
        let ids = scaled_pos_ids(PositionalScaling::from_resolutions(16, 16).unwrap()).unwrap();
        assert_eq!(ids[..2], [(0.0, 0.0), (0.0, 1.0)]);
        let unit = scaled_pos_ids(PositionalScaling { s: 1.0, patches: 2 }).unwrap();
        assert_eq!(unit, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]);
        let ps = PositionalScaling::from_resolutions(64, 16).unwrap();
        assert_eq!(ps.s, 4.0);
        assert_eq!(scaled_pos_ids(ps).unwrap()[1], (0.0, 4.0));
        let ps = PositionalScaling::from_resolutions(48, 16).unwrap();
        let ids = scaled_pos_ids(ps).unwrap();
        assert_eq!(ids.last().copied(), Some((45.0, 45.0)));
        assert!(scaled_pos_ids(PositionalScaling { s: 0.0, patches: 2 }).is_err());
        assert!(scaled_pos_ids(PositionalScaling { s: -1.0, patches: 2 }).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for draw in 0..10u64 {
            let base = small_base(if draw % 2 == 0 { CondMode::Joint } else { CondMode::Cross }, 20 + draw);
            let mut rng = seeded(40 + draw);
            let mut module = small_module(&base, &mut rng);
            randomize(&mut module.store, &mut rng);
            let (inp, prior) = small_input(&mut rng);
            let wout = Mat::randn(16, 4, 1.0, &mut rng);
            let loss_of = |store: &ParamStore| {
                let g = Graph::new();
                let pg = base.store.bind(&g, false);
                let pi = store.bind(&g, false);
                let pa = module.align.store.bind(&g, false);
                let out = module.forward(&g, &base, &pg, &pi, &pa, &inp, &prior, GateOverride::Learned).unwrap().out;
                out.mul(g.constant(wout.clone())).sum().scalar()
            };
            let g = Graph::new();
            let pg = base.store.bind(&g, false);
            let pi = module.store.bind(&g, true);
            let pa = module.align.store.bind(&g, false);
            let out = module.forward(&g, &base, &pg, &pi, &pa, &inp, &prior, GateOverride::Learned).unwrap().out;
            let analytic = pi.grads(&g.backward(out.mul(g.constant(wout.clone())).sum()));
            // Per parameter group: adapters, gates, prompt.
            let mut groups = [(0.0, 0.0); 3];
            for (k, id) in module.store.ids().enumerate() {
                let name = module.store.name(id).to_string();
                let gi = if name.contains("lora") { 0 } else if name.contains("gate") { 1 } else { 2 };
                let v = module.store.get(id).clone();
                for j in 0..v.len() {
                    let h = 1e-5;
                    let mut s = module.store.clone();
                    s.get_mut(id).data[j] = v.data[j] + h;
                    let lp = loss_of(&s);
                    s.get_mut(id).data[j] = v.data[j] - h;
                    let lm = loss_of(&s);
                    let fd = (lp - lm) / (2.0 * h);
                    groups[gi].0 += (fd - analytic[k].data[j]).powi(2);
                    groups[gi].1 += fd * fd;
                }
            }
            for (gi, (num, den)) in groups.iter().enumerate() {
                let rel = (num / den).sqrt();
                assert!(rel < 1e-4, "draw {draw} group {gi}: {rel}");
            }
        }
    }

    #[test]
    fn training_touches_only_injection_parameters() {
        use crate::align::{Frozen, PriorCorpus};
        use crate::models::corpus::toy_corpus;
        use crate::models::{Mae, MaeConfig, Vae, VaeConfig};
        let mut rng = seeded(70);
        let mae = Mae::new(MaeConfig::default(), &mut rng);
        let vae = Vae::new(VaeConfig::default(), &mut rng);
        let base = ToyDenoiser::new(DenoiserConfig { width: 32, layers: 2, heads: 2, ..DenoiserConfig::default() }, &mut rng);
        let frozen = Frozen { mae: &mae, vae: &vae, generator: &base };
        let data = PriorCorpus::new(&frozen, toy_corpus(2, 6, 64), &mut rng).unwrap();
        let align = AlignmentModule::new(AlignConfig { out_dim: 32, blocks: 1, ..AlignConfig::default() }, "align", &mut rng);
        let mut module = InjectionModule::new(&base, align, InjectConfig::default(), &mut rng).unwrap();
        let s = NoiseSchedule::diffusion(1000);
        let before = (module.store.digest(), module.align.store.digest());
        let zero = InjectTrainConfig { steps: 0, ..InjectTrainConfig::default() };
        assert!(train_inject(&mut module, &frozen, &data, &s, &zero, &mut rng).unwrap().is_empty());
        assert_eq!((module.store.digest(), module.align.store.digest()), before);
        let digests = frozen.digests();
        let cfg = InjectTrainConfig { steps: 3, batch: 2, ..InjectTrainConfig::default() };
        assert_eq!(train_inject(&mut module, &frozen, &data, &s, &cfg, &mut rng).unwrap().len(), 3);
        assert_eq!(frozen.digests(), digests);
        assert_ne!(module.store.digest(), before.0);
        assert_ne!(module.align.store.digest(), before.1);
    }
}
