//! Feature capsules and routing-by-agreement.
//!
//! Both routing levels of the model (feature capsules to per-event capsules,
//! cluster capsules to outcome capsules) use [`dynamic_routing`]. Routing
//! logits are not parameters: they start at zero on every forward pass.

use rand::Rng;

use crate::error::{HapError, Result};
use crate::numeric::{Shape, Tape, Tensor, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsuleLevel {
    Feature,
    Event,
    Cluster,
    Outcome,
}

/// A pose matrix recorded on a tape: `count` capsules of dimension `dim`,
/// one per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoseVar {
    pub var: Var,
    pub level: CapsuleLevel,
    pub count: usize,
    pub dim: usize,
}

/// Materialized pose matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMatrix {
    pub level: CapsuleLevel,
    capsules: Tensor,
}

impl PoseMatrix {
    pub fn new(level: CapsuleLevel, capsules: Tensor) -> Self {
        PoseMatrix { level, capsules }
    }

    pub fn from_tape(tape: &Tape, pose: PoseVar) -> Self {
        PoseMatrix {
            level: pose.level,
            capsules: tape.tensor(pose.var),
        }
    }

    pub fn count(&self) -> usize {
        self.capsules.shape().rows
    }

    pub fn dim(&self) -> usize {
        self.capsules.shape().cols
    }

    pub fn capsule(&self, i: usize) -> &[f64] {
        self.capsules.row(i)
    }

    pub fn capsules(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.count()).map(|i| self.capsules.row(i))
    }

    pub fn norms(&self) -> Vec<f64> {
        self.capsules()
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.capsules
    }
}

/// Logits and couplings of the final routing iteration; `couplings` is the
/// row-wise softmax of `logits`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub logits: Tensor,
    pub couplings: Tensor,
}

/// Per-capsule projection `W_i ∈ R^{d×h}` and bias `b_i ∈ R^h`.
#[derive(Debug, Clone)]
pub struct FeatureLayerParams {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub input_dim: usize,
    pub capsule_dim: usize,
}

impl FeatureLayerParams {
    /// Registers `feat.W.{i}` (`d x h`) and `feat.b.{i}` (`h`).
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        input_dim: usize,
        count: usize,
        capsule_dim: usize,
        bound: f64,
    ) -> Result<Self> {
        let mut weights = Vec::with_capacity(count);
        let mut biases = Vec::with_capacity(count);
        for i in 0..count {
            weights.push(store.insert_uniform(
                &format!("feat.W.{i}"),
                Shape::new(input_dim, capsule_dim),
                bound,
                rng,
            )?);
            biases.push(store.insert_uniform(
                &format!("feat.b.{i}"),
                Shape::vector(capsule_dim),
                bound,
                rng,
            )?);
        }
        Ok(FeatureLayerParams {
            weights,
            biases,
            input_dim,
            capsule_dim,
        })
    }

    pub fn count(&self) -> usize {
        self.weights.len()
    }
}

/// Transform matrices `W_ij ∈ R^{h_out×h_in}` for every (input, output)
/// capsule pair, stored in input-major order.
#[derive(Debug, Clone)]
pub struct RoutingParams {
    pub weights: Vec<ParamId>,
    pub n_in: usize,
    pub n_out: usize,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl RoutingParams {
    /// Registers `{prefix}.W.{i}.{j}`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        n_in: usize,
        n_out: usize,
        dim_in: usize,
        dim_out: usize,
        bound: f64,
    ) -> Result<Self> {
        let mut weights = Vec::with_capacity(n_in * n_out);
        for i in 0..n_in {
            for j in 0..n_out {
                weights.push(store.insert_uniform(
                    &format!("{prefix}.W.{i}.{j}"),
                    Shape::new(dim_out, dim_in),
                    bound,
                    rng,
                )?);
            }
        }
        Ok(RoutingParams {
            weights,
            n_in,
            n_out,
            dim_in,
            dim_out,
        })
    }

    pub fn weight(&self, i: usize, j: usize) -> ParamId {
        self.weights[i * self.n_out + j]
    }
}

/// `u_i = squash(tanh(W_iᵀ x) + b_i)` for every feature capsule.
pub fn disentangle_features(
    tape: &mut Tape,
    store: &ParamStore,
    params: &FeatureLayerParams,
    x: Var,
) -> Result<PoseVar> {
    let sx = tape.shape(x);
    if sx != Shape::vector(params.input_dim) {
        return Err(HapError::shape(
            "disentangle_features",
            Shape::vector(params.input_dim),
            sx,
        ));
    }
    let mut pre = Vec::with_capacity(params.count());
    for (w, b) in params.weights.iter().zip(&params.biases) {
        let w = tape.param(store, *w);
        let b = tape.param(store, *b);
        let proj = tape.matmul_tn(w, x)?;
        let act = tape.tanh(proj)?;
        pre.push(tape.add(act, b)?);
    }
    let stacked = tape.concat(&pre, Shape::new(params.count(), params.capsule_dim))?;
    let var = tape.squash_rows(stacked)?;
    Ok(PoseVar {
        var,
        level: CapsuleLevel::Feature,
        count: params.count(),
        dim: params.capsule_dim,
    })
}

/// Tape handles of the final routing iteration.
#[derive(Debug, Clone, Copy)]
pub struct RoutingVars {
    pub logits: Var,
    pub couplings: Var,
}

impl RoutingVars {
    pub fn state(&self, tape: &Tape) -> RoutingState {
        RoutingState {
            logits: tape.tensor(self.logits),
            couplings: tape.tensor(self.couplings),
        }
    }
}

/// Routing-by-agreement from `inputs` to `params.n_out` capsules.
///
/// Prediction vectors `û_{j|i} = W_ij u_i` are computed once; each iteration
/// sets `c = softmax_j(b)`, `s_j = squash(Σ_i c_ij û_{j|i})` and, between
/// iterations, `b_ij += û_{j|i} · s_j`.
pub fn dynamic_routing(
    tape: &mut Tape,
    store: &ParamStore,
    params: &RoutingParams,
    inputs: PoseVar,
    level: CapsuleLevel,
    iterations: usize,
) -> Result<(PoseVar, RoutingVars)> {
    if iterations == 0 {
        return Err(HapError::Contract(
            "routing needs at least one iteration".into(),
        ));
    }
    if inputs.count != params.n_in || inputs.dim != params.dim_in {
        return Err(HapError::shape(
            "dynamic_routing",
            Shape::new(params.n_in, params.dim_in),
            Shape::new(inputs.count, inputs.dim),
        ));
    }
    let weights: Vec<Var> = params
        .weights
        .iter()
        .map(|w| tape.param(store, *w))
        .collect();
    let predictions = tape.capsule_predict(&weights, inputs.var, params.n_out)?;
    let mut logits = tape.constant(Shape::new(params.n_in, params.n_out), 0.0);
    let mut iter = 0;
    loop {
        let couplings = tape.softmax_rows(logits)?;
        let combined = tape.route_combine(couplings, predictions)?;
        let outputs = tape.squash_rows(combined)?;
        iter += 1;
        if iter == iterations {
            let pose = PoseVar {
                var: outputs,
                level,
                count: params.n_out,
                dim: params.dim_out,
            };
            return Ok((pose, RoutingVars { logits, couplings }));
        }
        let agreement = tape.agreement(predictions, outputs)?;
        logits = tape.add(logits, agreement)?;
    }
}

/// One routing network per event, keyed by 1-based event id.
#[derive(Debug, Clone)]
pub struct EventBank {
    banks: Vec<RoutingParams>,
}

impl EventBank {
    /// Registers `event.{e}.W.{i}.{j}` for `e = 1..=n_events`.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_events: usize,
        n_in: usize,
        n_out: usize,
        dim: usize,
        bound: f64,
    ) -> Result<Self> {
        let banks = (1..=n_events)
            .map(|e| {
                RoutingParams::init(
                    store,
                    rng,
                    &format!("event.{e}"),
                    n_in,
                    n_out,
                    dim,
                    dim,
                    bound,
                )
            })
            .collect::<Result<_>>()?;
        Ok(EventBank { banks })
    }

    pub fn n_events(&self) -> usize {
        self.banks.len()
    }

    pub fn get(&self, event_id: usize) -> Result<&RoutingParams> {
        if event_id == 0 || event_id > self.banks.len() {
            return Err(HapError::Lookup {
                kind: "event",
                key: format!("{event_id} (valid ids are 1..={})", self.banks.len()),
            });
        }
        Ok(&self.banks[event_id - 1])
    }
}

/// Event capsules `S^(e)` for one event, routed with that event's network.
pub fn event_capsules(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &EventBank,
    features: PoseVar,
    event_id: usize,
    iterations: usize,
) -> Result<PoseVar> {
    let params = bank.get(event_id)?;
    let (pose, _) = dynamic_routing(
        tape,
        store,
        params,
        features,
        CapsuleLevel::Event,
        iterations,
    )?;
    Ok(pose)
}

/// Outcome capsules `Z` routed from the cluster capsules.
pub fn outcome_capsules(
    tape: &mut Tape,
    store: &ParamStore,
    params: &RoutingParams,
    cluster: PoseVar,
    iterations: usize,
) -> Result<(PoseVar, RoutingVars)> {
    dynamic_routing(
        tape,
        store,
        params,
        cluster,
        CapsuleLevel::Outcome,
        iterations,
    )
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::numeric::squash;
    use crate::params::GradBuffer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn routing_setup(
        n_in: usize,
        n_out: usize,
        h: usize,
        seed: u64,
    ) -> (ParamStore, RoutingParams, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params =
            RoutingParams::init(&mut store, &mut rng, "r", n_in, n_out, h, h, 0.8).unwrap();
        let data = (0..n_in * h).map(|_| rng.random_range(-0.6..0.6)).collect();
        let u = Tensor::matrix(n_in, h, data).unwrap();
        (store, params, u)
    }

    fn pose_input(tape: &mut Tape, u: &Tensor, level: CapsuleLevel) -> PoseVar {
        let var = tape.input(u);
        PoseVar {
            var,
            level,
            count: u.shape().rows,
            dim: u.shape().cols,
        }
    }

    /// `û_{j|i}` evaluated directly from the stored matrices.
    fn predictions(store: &ParamStore, p: &RoutingParams, u: &Tensor) -> Vec<Vec<Vec<f64>>> {
        (0..p.n_in)
            .map(|i| {
                (0..p.n_out)
                    .map(|j| {
                        let w = store.tensor(p.weight(i, j));
                        (0..p.dim_out)
                            .map(|r| (0..p.dim_in).map(|c| w.get(r, c) * u.get(i, c)).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn feature_capsule_shapes_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let fp = FeatureLayerParams::init(&mut store, &mut rng, 50, 5, 8, 0.1).unwrap();
        let x: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.input_vector(&x).unwrap();
        let u = disentangle_features(&mut tape, &store, &fp, xv).unwrap();
        let pm = PoseMatrix::from_tape(&tape, u);
        assert_eq!((pm.count(), pm.dim()), (5, 8));
        assert!(pm.norms().iter().all(|&n| n < 1.0));

        // matches the formula evaluated by hand
        for i in 0..5 {
            let w = store.get(&format!("feat.W.{i}")).unwrap();
            let b = store.get(&format!("feat.b.{i}")).unwrap();
            let pre: Vec<f64> = (0..8)
                .map(|c| (0..50).map(|r| w.get(r, c) * x[r]).sum::<f64>().tanh() + b.data()[c])
                .collect();
            let expect = squash(&pre).unwrap();
            for (a, e) in pm.capsule(i).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-14);
            }
        }

        let mut tape = Tape::new();
        let bad = tape.input_vector(&x[..10]).unwrap();
        assert!(matches!(
            disentangle_features(&mut tape, &store, &fp, bad),
            Err(HapError::Shape { .. })
        ));
    }

    #[test]
    fn zero_feature_params_give_zero_capsules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let fp = FeatureLayerParams::init(&mut store, &mut rng, 6, 3, 4, 0.0).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input_vector(&[1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap();
        let u = disentangle_features(&mut tape, &store, &fp, xv).unwrap();
        assert!(tape.value(u.var).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_iteration_is_uniform_average() {
        let (store, params, u) = routing_setup(5, 5, 8, 11);
        let mut tape = Tape::new();
        let input = pose_input(&mut tape, &u, CapsuleLevel::Feature);
        let (out, state) =
            dynamic_routing(&mut tape, &store, &params, input, CapsuleLevel::Event, 1).unwrap();
        let out = PoseMatrix::from_tape(&tape, out);
        let uhat = predictions(&store, &params, &u);
        for j in 0..5 {
            let mean: Vec<f64> = (0..8)
                .map(|r| (0..5).map(|i| uhat[i][j][r]).sum::<f64>() / 5.0)
                .collect();
            let expect = squash(&mean).unwrap();
            for (a, e) in out.capsule(j).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-14);
            }
        }
        let st = state.state(&tape);
        assert!(st.logits.data().iter().all(|&b| b == 0.0));
        assert!(st.couplings.data().iter().all(|&c| (c - 0.2).abs() < 1e-15));
    }

    #[test]
    fn three_iterations_match_hand_loop() {
        let (store, params, u) = routing_setup(4, 3, 5, 12);
        let mut tape = Tape::new();
        let input = pose_input(&mut tape, &u, CapsuleLevel::Cluster);
        let (out, state) =
            dynamic_routing(&mut tape, &store, &params, input, CapsuleLevel::Outcome, 3).unwrap();
        let out = PoseMatrix::from_tape(&tape, out);

        let uhat = predictions(&store, &params, &u);
        let mut b = vec![vec![0.0; 3]; 4];
        let mut s = vec![vec![0.0; 5]; 3];
        let mut c = b.clone();
        for it in 0..3 {
            c = b
                .iter()
                .map(|row| crate::numeric::softmax(row).unwrap())
                .collect();
            for j in 0..3 {
                let sh: Vec<f64> = (0..5)
                    .map(|r| (0..4).map(|i| c[i][j] * uhat[i][j][r]).sum())
                    .collect();
                s[j] = squash(&sh).unwrap();
            }
            if it < 2 {
                for i in 0..4 {
                    for j in 0..3 {
                        b[i][j] += (0..5).map(|r| uhat[i][j][r] * s[j][r]).sum::<f64>();
                    }
                }
            }
        }
        for j in 0..3 {
            for (a, e) in out.capsule(j).iter().zip(&s[j]) {
                assert!((a - e).abs() < 1e-14);
            }
        }
        let st = state.state(&tape);
        for i in 0..4 {
            for j in 0..3 {
                assert!((st.couplings.get(i, j) - c[i][j]).abs() < 1e-14);
                assert!((st.logits.get(i, j) - b[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn identical_predictions_keep_uniform_couplings() {
        // W_ij independent of j => û_{j|i} identical across j
        let (n_in, n_out, h) = (4, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mut weights = Vec::new();
        for i in 0..n_in {
            let data: Vec<f64> = (0..h * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            for j in 0..n_out {
                weights.push(
                    store
                        .insert(
                            &format!("w.{i}.{j}"),
                            Tensor::matrix(h, h, data.clone()).unwrap(),
                        )
                        .unwrap(),
                );
            }
        }
        let params = RoutingParams {
            weights,
            n_in,
            n_out,
            dim_in: h,
            dim_out: h,
        };
        let u = Tensor::matrix(
            n_in,
            h,
            (0..n_in * h).map(|k| (k as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        for iters in 1..=4 {
            let mut tape = Tape::new();
            let input = pose_input(&mut tape, &u, CapsuleLevel::Feature);
            let (_, state) = dynamic_routing(
                &mut tape,
                &store,
                &params,
                input,
                CapsuleLevel::Event,
                iters,
            )
            .unwrap();
            let c = state.state(&tape).couplings;
            assert!(c.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_iterations_rejected() {
        let (store, params, u) = routing_setup(2, 2, 3, 1);
        let mut tape = Tape::new();
        let input = pose_input(&mut tape, &u, CapsuleLevel::Feature);
        assert!(matches!(
            dynamic_routing(&mut tape, &store, &params, input, CapsuleLevel::Event, 0),
            Err(HapError::Contract(_))
        ));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let (store, params, _) = routing_setup(3, 2, 4, 1);
        let mut tape = Tape::new();
        let u = Tensor::zeros(Shape::new(2, 4));
        let input = pose_input(&mut tape, &u, CapsuleLevel::Feature);
        assert!(matches!(
            dynamic_routing(&mut tape, &store, &params, input, CapsuleLevel::Event, 3),
            Err(HapError::Shape { .. })
        ));
    }

    #[test]
    fn event_bank_lookup_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let fp = FeatureLayerParams::init(&mut store, &mut rng, 10, 5, 8, 0.3).unwrap();
        let bank = EventBank::init(&mut store, &mut rng, 6, 5, 5, 8, 0.3).unwrap();
        let mut tape = Tape::new();
        let x = tape.input_vector(&[0.5; 10]).unwrap();
        let u = disentangle_features(&mut tape, &store, &fp, x).unwrap();
        let s = event_capsules(&mut tape, &store, &bank, u, 3, 3).unwrap();
        assert_eq!((s.count, s.dim, s.level), (5, 8, CapsuleLevel::Event));
        assert!(matches!(
            event_capsules(&mut tape, &store, &bank, u, 0, 3),
            Err(HapError::Lookup { .. })
        ));
        assert!(event_capsules(&mut tape, &store, &bank, u, 7, 3).is_err());
    }

    #[test]
    fn only_routed_events_receive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let fp = FeatureLayerParams::init(&mut store, &mut rng, 6, 3, 4, 0.5).unwrap();
        let bank = EventBank::init(&mut store, &mut rng, 4, 3, 3, 4, 0.5).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .input_vector(&[0.3, -0.2, 1.0, 0.4, -1.5, 0.9])
            .unwrap();
        let u = disentangle_features(&mut tape, &store, &fp, x).unwrap();
        let s1 = event_capsules(&mut tape, &store, &bank, u, 1, 3).unwrap();
        let s3 = event_capsules(&mut tape, &store, &bank, u, 3, 3).unwrap();
        let both = tape.add(s1.var, s3.var).unwrap();
        let loss = tape.sum(both).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut buf = GradBuffer::zeros_like(&store);
        tape.accumulate_param_grads(&g, &mut buf);
        for e in 1..=4 {
            let total: f64 = bank
                .get(e)
                .unwrap()
                .weights
                .iter()
                .map(|id| buf.get(*id).iter().map(|v| v.abs()).sum::<f64>())
                .sum();
            if e == 1 || e == 3 {
                assert!(total > 0.0);
            } else {
                assert_eq!(total, 0.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn couplings_simplex_and_norms_bounded(seed in 0u64..10_000, iters in 1usize..5) {
            let (store, params, u) = routing_setup(5, 4, 6, seed);
            let mut tape = Tape::new();
            let input = pose_input(&mut tape, &u, CapsuleLevel::Feature);
            let (out, state) =
                dynamic_routing(&mut tape, &store, &params, input, CapsuleLevel::Event, iters).unwrap();
            let c = state.state(&tape).couplings;
            for i in 0..5 {
                let row: f64 = (0..4).map(|j| c.get(i, j)).sum();
                prop_assert!((row - 1.0).abs() < 1e-12);
            }
            prop_assert!(PoseMatrix::from_tape(&tape, out).norms().iter().all(|&n| n < 1.0));
        }

        #[test]
        fn routing_is_permutation_equivariant(seed in 0u64..10_000, rot in 1usize..5) {
            let (store, params, u) = routing_setup(5, 3, 4, seed);
            // permute input capsules together with their rows of W
            let perm: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
            let pu = Tensor::matrix(
                5,
                4,
                perm.iter().flat_map(|&i| u.row(i).to_vec()).collect(),
            )
            .unwrap();
            let pparams = RoutingParams {
                weights: perm
                    .iter()
                    .flat_map(|&i| (0..3).map(move |j| (i, j)))
                    .map(|(i, j)| params.weight(i, j))
                    .collect(),
                ..params.clone()
            };
            let run = |p: &RoutingParams, u: &Tensor| {
                let mut tape = Tape::new();
                let input = pose_input(&mut tape, u, CapsuleLevel::Feature);
                let (out, _) =
                    dynamic_routing(&mut tape, &store, p, input, CapsuleLevel::Event, 3).unwrap();
                tape.value(out.var).to_vec()
            };
            let a = run(&params, &u);
            let b = run(&pparams, &pu);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
