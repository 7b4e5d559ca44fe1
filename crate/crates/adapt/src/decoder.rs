//! Endpoint-conditioned trajectory decoding.
//!
//! The decoder expands per-agent features to `K` modes via a learned mode
//! embedding, proposes endpoints (static MLP head or adaptive dynamic-weight
//! head), refines them with an offset MLP, interpolates intermediate steps,
//! and scores modes — with detached endpoint values feeding every
//! conditioning branch so refinement, interpolation, and scoring cannot push
//! gradient back into the endpoint head except through the trajectory's
//! final step.

use adapt_tensor::{Graph, Real, Result, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{LayerNormParams, Linear};
use crate::params::{self, ParamId, ParamSet};
use crate::scene::Point;

/// Width of the per-agent meta-info vector appended to encoder features.
pub const META_WIDTH: usize = 5;

/// Endpoint head flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Static,
    #[default]
    Adaptive,
}

/// Two dense layers with layer normalization and ReLU after the first and a
/// residual connection at the last layer (projected when widths differ).
#[derive(Debug, Clone)]
pub struct HeadMlp {
    pub lin1: Linear,
    pub ln: LayerNormParams,
    pub lin2: Linear,
    pub skip: Option<Linear>,
    pub d_in: usize,
    pub d_out: usize,
}

impl HeadMlp {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> HeadMlp {
        let lin1 = Linear::init(ps, rng, &format!("{name}.lin1"), d_in, d_hidden, true);
        let ln = LayerNormParams::init(ps, &format!("{name}.ln"), d_hidden);
        let lin2 = Linear::init(ps, rng, &format!("{name}.lin2"), d_hidden, d_out, true);
        let skip = (d_in != d_out)
            .then(|| Linear::init(ps, rng, &format!("{name}.skip"), d_in, d_out, false));
        HeadMlp {
            lin1,
            ln,
            lin2,
            skip,
            d_in,
            d_out,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[TensorId], x: TensorId) -> Result<TensorId> {
        let h = self.lin1.apply(g, p, x)?;
        let h = self.ln.apply(g, p, h)?;
        let h = g.relu(h);
        let y = self.lin2.apply(g, p, h)?;
        let res = match &self.skip {
            Some(proj) => proj.apply(g, p, x)?,
            None => x,
        };
        g.add(y, res)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.lin1.w, self.ln.gain, self.ln.bias, self.lin2.w];
        ids.extend(self.lin1.b);
        ids.extend(self.lin2.b);
        if let Some(proj) = &self.skip {
            ids.push(proj.w);
        }
        ids
    }
}

/// Endpoint head parameters.
#[derive(Debug, Clone)]
pub enum Head {
    Static(HeadMlp),
    /// Dynamic-weight head: a meta MLP turns each mode-expanded row into a
    /// generator vector from which per-(agent, mode) weight matrices are
    /// produced and applied to the row itself.
    Adaptive {
        meta_mlp: HeadMlp,
        w_d1: ParamId,
        w_d2: ParamId,
        ln: LayerNormParams,
        h_dyn: usize,
        d_tilde: usize,
    },
}

impl Head {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Head::Static(mlp) => mlp.param_ids(),
            Head::Adaptive {
                meta_mlp,
                w_d1,
                w_d2,
                ln,
                ..
            } => {
                let mut ids = meta_mlp.param_ids();
                ids.extend([*w_d1, *w_d2, ln.gain, ln.bias]);
                ids
            }
        }
    }
}

/// Tape handles for one decoded batch of target agents.
#[derive(Debug, Clone)]
pub struct DecodeOut {
    pub n_agents: usize,
    pub k: usize,
    pub t_future: usize,
    /// `(n_agents*k, 2)` raw endpoint proposals.
    pub endpoints_raw: TensorId,
    /// `(n_agents*k, 2)` refinement offsets; `None` when refinement is off.
    pub offsets: Option<TensorId>,
    /// `(n_agents*k, 2)` refined endpoints.
    pub endpoints: TensorId,
    /// `(n_agents*k, t_future, 2)`; final step is the refined endpoint.
    pub trajectories: TensorId,
    /// `(n_agents, k)` softmax-normalized mode probabilities.
    pub scores: TensorId,
}

/// Value-level prediction for one target agent.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionSet {
    pub endpoints_raw: Vec<Point>,
    pub offsets: Vec<Point>,
    pub endpoints: Vec<Point>,
    /// `k` trajectories of `t_future` points each.
    pub trajectories: Vec<Vec<Point>>,
    pub scores: Vec<f64>,
}

/// Decoder parameters and composition.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub d_in: usize,
    pub k: usize,
    pub t_future: usize,
    pub stop_gradient: bool,
    pub refinement: bool,
    pub mode_embedding: ParamId,
    pub head: Head,
    pub refine_mlp: HeadMlp,
    pub interp_mlp: Option<HeadMlp>,
    pub score_mlp: HeadMlp,
}

impl Decoder {
    /// `d` is the encoder feature width; decoder rows are `d + META_WIDTH`
    /// wide. Head MLPs use hidden width `d`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        k: usize,
        t_future: usize,
        head_kind: HeadKind,
        stop_gradient: bool,
        refinement: bool,
    ) -> Decoder {
        assert!(k >= 1, "need at least one mode");
        assert!(t_future >= 1, "need at least one future step");
        let d_in = d + META_WIDTH;
        let mode_embedding = ps.add(
            format!("{name}.mode_embedding"),
            params::uniform(rng, vec![k, d_in], 0.1),
        );
        let head = match head_kind {
            HeadKind::Static => Head::Static(HeadMlp::init(
                ps,
                rng,
                &format!("{name}.static_head"),
                d_in,
                d,
                2,
            )),
            HeadKind::Adaptive => {
                let d_tilde = d;
                let h_dyn = d;
                Head::Adaptive {
                    meta_mlp: HeadMlp::init(ps, rng, &format!("{name}.meta_mlp"), d_in, d, d_tilde),
                    w_d1: ps.add(
                        format!("{name}.w_d1"),
                        params::xavier_uniform(rng, d_tilde, h_dyn * d_in),
                    ),
                    w_d2: ps.add(
                        format!("{name}.w_d2"),
                        params::xavier_uniform(rng, d_tilde, 2 * h_dyn),
                    ),
                    ln: LayerNormParams::init(ps, &format!("{name}.dyn_ln"), h_dyn),
                    h_dyn,
                    d_tilde,
                }
            }
        };
        let refine_mlp = HeadMlp::init(ps, rng, &format!("{name}.refine"), d_in + 2, d, 2);
        let interp_mlp = (t_future > 1).then(|| {
            HeadMlp::init(
                ps,
                rng,
                &format!("{name}.interp"),
                d_in + 2,
                d,
                2 * (t_future - 1),
            )
        });
        let score_mlp = HeadMlp::init(ps, rng, &format!("{name}.score"), d_in + 2, d, 1);
        Decoder {
            d_in,
            k,
            t_future,
            stop_gradient,
            refinement,
            mode_embedding,
            head,
            refine_mlp,
            interp_mlp,
            score_mlp,
        }
    }

    /// Expand `(n, d_in)` agent features to `(n*k, d_in)` mode rows by adding
    /// the learned per-mode embedding. Rows are agent-major: agent `i`, mode
    /// `j` lands at row `i*k + j`.
    pub fn expand_modes<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        feats: TensorId,
    ) -> Result<TensorId> {
        let n = g.shape(feats)[0];
        let expanded = g.reshape(feats, vec![n, 1, self.d_in])?;
        let expanded = g.broadcast_to(expanded, vec![n, self.k, self.d_in])?;
        let emb = g.reshape(p[self.mode_embedding.index()], vec![1, self.k, self.d_in])?;
        let emb = g.broadcast_to(emb, vec![n, self.k, self.d_in])?;
        let rows = g.add(expanded, emb)?;
        g.reshape(rows, vec![n * self.k, self.d_in])
    }

    /// Raw endpoint proposals `(rows, 2)` from mode rows `(rows, d_in)`.
    pub fn head_endpoints<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        rows: TensorId,
    ) -> Result<TensorId> {
        match &self.head {
            Head::Static(mlp) => mlp.apply(g, p, rows),
            Head::Adaptive {
                meta_mlp,
                w_d1,
                w_d2,
                ln,
                h_dyn,
                ..
            } => {
                let n_rows = g.shape(rows)[0];
                let f_tilde = meta_mlp.apply(g, p, rows)?;
                // W_1 = W_d1 · f̃, applied per row: h = W_1 · f.
                let w1 = g.matmul(f_tilde, p[w_d1.index()])?;
                let w1 = g.reshape(w1, vec![n_rows, *h_dyn, self.d_in])?;
                let f_b = g.reshape(rows, vec![n_rows, 1, self.d_in])?;
                let f_b = g.broadcast_to(f_b, vec![n_rows, *h_dyn, self.d_in])?;
                let prod = g.mul(w1, f_b)?;
                let h = g.sum_axis(prod, 2)?;
                let h = ln.apply(g, p, h)?;
                let h = g.relu(h);
                // W_2 = W_d2 · f̃; ŷ = W_2 · h.
                let w2 = g.matmul(f_tilde, p[w_d2.index()])?;
                let w2 = g.reshape(w2, vec![n_rows, 2, *h_dyn])?;
                let h_b = g.reshape(h, vec![n_rows, 1, *h_dyn])?;
                let h_b = g.broadcast_to(h_b, vec![n_rows, 2, *h_dyn])?;
                let prod = g.mul(w2, h_b)?;
                g.sum_axis(prod, 2)
            }
        }
    }

    fn condition<T: Real>(&self, g: &mut Graph<T>, endpoints: TensorId) -> TensorId {
        if self.stop_gradient {
            g.detach(endpoints)
        } else {
            endpoints
        }
    }

    /// Offsets `(rows, 2)` from mode rows and (detached) raw endpoints.
    pub fn refine_offsets<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        rows: TensorId,
        endpoints_cond: TensorId,
    ) -> Result<TensorId> {
        let joint = g.concat(&[rows, endpoints_cond], 1)?;
        self.refine_mlp.apply(g, p, joint)
    }

    /// Full trajectories `(rows, t_future, 2)`: interpolated intermediate
    /// steps conditioned on detached refined endpoints, with the live refined
    /// endpoint concatenated as the final step.
    pub fn interpolate<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        rows: TensorId,
        endpoints_cond: TensorId,
        endpoints_live: TensorId,
    ) -> Result<TensorId> {
        let n_rows = g.shape(rows)[0];
        let end3 = g.reshape(endpoints_live, vec![n_rows, 1, 2])?;
        match &self.interp_mlp {
            Some(mlp) => {
                let joint = g.concat(&[rows, endpoints_cond], 1)?;
                let mid = mlp.apply(g, p, joint)?;
                let mid = g.reshape(mid, vec![n_rows, self.t_future - 1, 2])?;
                g.concat(&[mid, end3], 1)
            }
            None => Ok(end3),
        }
    }

    /// Mode probabilities `(n_agents, k)` from mode rows and (detached)
    /// refined endpoints.
    pub fn score<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        rows: TensorId,
        endpoints_cond: TensorId,
        n_agents: usize,
    ) -> Result<TensorId> {
        let joint = g.concat(&[rows, endpoints_cond], 1)?;
        let logits = self.score_mlp.apply(g, p, joint)?;
        let logits = g.reshape(logits, vec![n_agents, self.k])?;
        g.softmax(logits, 1)
    }

    /// Compose expansion, endpoint head, refinement, interpolation, and
    /// scoring for a batch of `(n, d_in)` target-agent features.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[TensorId],
        feats: TensorId,
    ) -> Result<DecodeOut> {
        let n = g.shape(feats)[0];
        let rows = self.expand_modes(g, p, feats)?;
        let raw = self.head_endpoints(g, p, rows)?;
        let (offsets, endpoints) = if self.refinement {
            let cond = self.condition(g, raw);
            let offsets = self.refine_offsets(g, p, rows, cond)?;
            let refined = g.add(raw, offsets)?;
            (Some(offsets), refined)
        } else {
            (None, raw)
        };
        let cond = self.condition(g, endpoints);
        let trajectories = self.interpolate(g, p, rows, cond, endpoints)?;
        let scores = self.score(g, p, rows, cond, n)?;
        Ok(DecodeOut {
            n_agents: n,
            k: self.k,
            t_future: self.t_future,
            endpoints_raw: raw,
            offsets,
            endpoints,
            trajectories,
            scores,
        })
    }
}

/// Read one agent's prediction out of a decoded batch.
pub fn extract_prediction<T: Real>(g: &Graph<T>, out: &DecodeOut, agent: usize) -> PredictionSet {
    assert!(agent < out.n_agents, "agent index out of range");
    let k = out.k;
    let t = out.t_future;
    let pair = |data: &[T], row: usize| -> Point {
        [Real::to_f64(data[row * 2]), Real::to_f64(data[row * 2 + 1])]
    };
    let raw = g.value(out.endpoints_raw);
    let refined = g.value(out.endpoints);
    let traj = g.value(out.trajectories);
    let scores = g.value(out.scores);
    let mut set = PredictionSet {
        endpoints_raw: Vec::with_capacity(k),
        offsets: Vec::with_capacity(k),
        endpoints: Vec::with_capacity(k),
        trajectories: Vec::with_capacity(k),
        scores: Vec::with_capacity(k),
    };
    for mode in 0..k {
        let row = agent * k + mode;
        set.endpoints_raw.push(pair(raw.data(), row));
        set.endpoints.push(pair(refined.data(), row));
        set.offsets.push(match out.offsets {
            Some(off) => pair(g.value(off).data(), row),
            None => [0.0, 0.0],
        });
        let steps = (0..t)
            .map(|s| pair(traj.data(), row * t + s))
            .collect::<Vec<_>>();
        set.trajectories.push(steps);
        set.scores
            .push(Real::to_f64(scores.data()[agent * k + mode]));
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use adapt_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_rows(r: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
        let data = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn zero_all(ps: &mut ParamSet<f64>) {
        for id in ps.ids().collect::<Vec<_>>() {
            let shape = ps.value(id).shape().to_vec();
            *ps.value_mut(id) = Tensor::zeros(shape);
        }
    }

    fn build(
        d: usize,
        k: usize,
        t_future: usize,
        head: HeadKind,
        stop_gradient: bool,
        seed: u64,
    ) -> (ParamSet<f64>, Decoder) {
        let mut ps = ParamSet::new();
        let mut r = rng(seed);
        let dec = Decoder::init(&mut ps, &mut r, "dec", d, k, t_future, head, stop_gradient, true);
        (ps, dec)
    }

    #[test]
    fn zero_parameters_give_zero_endpoints_and_uniform_scores() {
        for head in [HeadKind::Static, HeadKind::Adaptive] {
            let (mut ps, dec) = build(6, 3, 4, head, true, 5);
            zero_all(&mut ps);
            let mut g = Graph::new();
            let p = ps.register(&mut g);
            let feats = g.constant(rand_rows(&mut rng(9), 2, 6 + META_WIDTH));
            let out = dec.decode(&mut g, &p, feats).unwrap();
            assert!(g.value(out.endpoints_raw).data().iter().all(|&v| v == 0.0));
            assert!(g.value(out.endpoints).data().iter().all(|&v| v == 0.0));
            assert!(g.value(out.trajectories).data().iter().all(|&v| v == 0.0));
            let scores = g.value(out.scores).data();
            assert!(scores.iter().all(|&s| (s - 1.0 / 3.0).abs() < 1e-12));
        }
    }

    #[test]
    fn identical_feature_rows_decode_identically() {
        let (ps, dec) = build(8, 4, 6, HeadKind::Adaptive, true, 11);
        let row = rand_rows(&mut rng(2), 1, 8 + META_WIDTH);
        let doubled = Tensor::new(
            vec![2, 8 + META_WIDTH],
            [row.data(), row.data()].concat(),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(doubled);
        let out = dec.decode(&mut g, &p, feats).unwrap();
        let a = extract_prediction(&g, &out, 0);
        let b = extract_prediction(&g, &out, 1);
        assert_eq!(a.endpoints, b.endpoints);
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.scores, b.scores);
    }

    /// Scalar reference for a head MLP row: lin→LN→relu→lin plus projected
    /// residual.
    #[allow(clippy::too_many_arguments)]
    fn head_mlp_oracle(
        x: &[f64],
        w1: &[f64],
        b1: &[f64],
        gain: &[f64],
        bias: &[f64],
        w2: &[f64],
        b2: &[f64],
        skip: Option<&[f64]>,
        d_h: usize,
        d_out: usize,
    ) -> Vec<f64> {
        let d_in = x.len();
        let mut h = vec![0.0; d_h];
        for j in 0..d_h {
            h[j] = b1[j] + (0..d_in).map(|i| x[i] * w1[i * d_h + j]).sum::<f64>();
        }
        let mean = h.iter().sum::<f64>() / d_h as f64;
        let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d_h as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        let act: Vec<f64> = h
            .iter()
            .enumerate()
            .map(|(j, v)| (gain[j] * (v - mean) * inv + bias[j]).max(0.0))
            .collect();
        (0..d_out)
            .map(|j| {
                let main =
                    b2[j] + (0..d_h).map(|i| act[i] * w2[i * d_out + j]).sum::<f64>();
                let res = match skip {
                    Some(sw) => (0..d_in).map(|i| x[i] * sw[i * d_out + j]).sum::<f64>(),
                    None => x[j],
                };
                main + res
            })
            .collect()
    }

    #[test]
    fn static_head_matches_scalar_reference() {
        let d = 4;
        let k = 2;
        let (ps, dec) = build(d, k, 3, HeadKind::Static, true, 17);
        let d_in = d + META_WIDTH;
        let feats = rand_rows(&mut rng(3), 2, d_in);

        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let fid = g.constant(feats.clone());
        let rows = dec.expand_modes(&mut g, &p, fid).unwrap();
        let raw = dec.head_endpoints(&mut g, &p, rows).unwrap();
        let got = g.value(raw).data().to_vec();

        let mlp = match &dec.head {
            Head::Static(m) => m,
            _ => unreachable!(),
        };
        let emb = ps.value(dec.mode_embedding).data();
        let w1 = ps.value(mlp.lin1.w).data();
        let b1 = ps.value(mlp.lin1.b.unwrap()).data();
        let gain = ps.value(mlp.ln.gain).data();
        let bias = ps.value(mlp.ln.bias).data();
        let w2 = ps.value(mlp.lin2.w).data();
        let b2 = ps.value(mlp.lin2.b.unwrap()).data();
        let skip = ps.value(mlp.skip.as_ref().unwrap().w).data();
        for agent in 0..2 {
            for mode in 0..k {
                let x: Vec<f64> = (0..d_in)
                    .map(|i| feats.data()[agent * d_in + i] + emb[mode * d_in + i])
                    .collect();
                let expect =
                    head_mlp_oracle(&x, w1, b1, gain, bias, w2, b2, Some(skip), d, 2);
                let row = agent * k + mode;
                for j in 0..2 {
                    assert!(
                        (got[row * 2 + j] - expect[j]).abs() < 1e-9,
                        "agent {agent} mode {mode} coord {j}"
                    );
                }
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // the oracle mirrors index math
    fn adaptive_head_matches_scalar_reference() {
        let d = 4;
        let k = 2;
        let (ps, dec) = build(d, k, 3, HeadKind::Adaptive, true, 29);
        let d_in = d + META_WIDTH;
        let feats = rand_rows(&mut rng(13), 1, d_in);

        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let fid = g.constant(feats.clone());
        let rows = dec.expand_modes(&mut g, &p, fid).unwrap();
        let raw = dec.head_endpoints(&mut g, &p, rows).unwrap();
        let got = g.value(raw).data().to_vec();

        let (meta_mlp, w_d1, w_d2, dyn_ln, h_dyn) = match &dec.head {
            Head::Adaptive {
                meta_mlp,
                w_d1,
                w_d2,
                ln,
                h_dyn,
                ..
            } => (meta_mlp, *w_d1, *w_d2, ln, *h_dyn),
            _ => unreachable!(),
        };
        let emb = ps.value(dec.mode_embedding).data();
        let wd1 = ps.value(w_d1).data();
        let wd2 = ps.value(w_d2).data();
        let dgain = ps.value(dyn_ln.gain).data();
        let dbias = ps.value(dyn_ln.bias).data();
        for mode in 0..k {
            let x: Vec<f64> = (0..d_in)
                .map(|i| feats.data()[i] + emb[mode * d_in + i])
                .collect();
            let f_tilde = head_mlp_oracle(
                &x,
                ps.value(meta_mlp.lin1.w).data(),
                ps.value(meta_mlp.lin1.b.unwrap()).data(),
                ps.value(meta_mlp.ln.gain).data(),
                ps.value(meta_mlp.ln.bias).data(),
                ps.value(meta_mlp.lin2.w).data(),
                ps.value(meta_mlp.lin2.b.unwrap()).data(),
                meta_mlp.skip.as_ref().map(|s| {
                    let w: &[f64] = ps.value(s.w).data();
                    w
                }),
                d,
                d,
            );
            // W1 row-major (h_dyn, d_in), flattened from f̃ · W_d1.
            let mut h = vec![0.0; h_dyn];
            for r in 0..h_dyn {
                for c in 0..d_in {
                    let flat = r * d_in + c;
                    let w1_rc: f64 = (0..d)
                        .map(|t| f_tilde[t] * wd1[t * (h_dyn * d_in) + flat])
                        .sum();
                    h[r] += w1_rc * x[c];
                }
            }
            let mean = h.iter().sum::<f64>() / h_dyn as f64;
            let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h_dyn as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            let act: Vec<f64> = h
                .iter()
                .enumerate()
                .map(|(j, v)| (dgain[j] * (v - mean) * inv + dbias[j]).max(0.0))
                .collect();
            let mut expect = [0.0; 2];
            for (r, e) in expect.iter_mut().enumerate() {
                for c in 0..h_dyn {
                    let flat = r * h_dyn + c;
                    let w2_rc: f64 = (0..d)
                        .map(|t| f_tilde[t] * wd2[t * (2 * h_dyn) + flat])
                        .sum();
                    *e += w2_rc * act[c];
                }
            }
            for j in 0..2 {
                assert!(
                    (got[mode * 2 + j] - expect[j]).abs() < 1e-9,
                    "mode {mode} coord {j}: {} vs {}",
                    got[mode * 2 + j],
                    expect[j]
                );
            }
        }
    }

    #[test]
    fn zero_weight_generators_give_zero_endpoints() {
        let (mut ps, dec) = build(6, 3, 4, HeadKind::Adaptive, true, 31);
        if let Head::Adaptive { w_d1, w_d2, .. } = &dec.head {
            *ps.value_mut(*w_d1) = Tensor::zeros(ps.value(*w_d1).shape().to_vec());
            *ps.value_mut(*w_d2) = Tensor::zeros(ps.value(*w_d2).shape().to_vec());
        }
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(rand_rows(&mut rng(7), 3, 6 + META_WIDTH));
        let rows = dec.expand_modes(&mut g, &p, feats).unwrap();
        let raw = dec.head_endpoints(&mut g, &p, rows).unwrap();
        assert!(g.value(raw).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn yaw_flip_changes_adaptive_endpoints() {
        let (ps, dec) = build(6, 2, 4, HeadKind::Adaptive, true, 37);
        let d_in = 6 + META_WIDTH;
        let base = rand_rows(&mut rng(19), 1, d_in);
        let mut flipped = base.data().to_vec();
        // Meta occupies the last five lanes: [x, y, x_prev, y_prev, yaw].
        flipped[d_in - 1] += std::f64::consts::PI;
        let both = Tensor::new(vec![2, d_in], [base.data(), &flipped[..]].concat()).unwrap();

        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(both);
        let out = dec.decode(&mut g, &p, feats).unwrap();
        let a = extract_prediction(&g, &out, 0);
        let b = extract_prediction(&g, &out, 1);
        let diff = a
            .endpoints
            .iter()
            .flatten()
            .zip(b.endpoints.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-6, "yaw flip should move endpoints, diff={diff}");
    }

    #[test]
    fn zero_refine_mlp_keeps_raw_endpoints() {
        let (mut ps, dec) = build(6, 3, 4, HeadKind::Static, true, 41);
        for id in dec.refine_mlp.param_ids() {
            let shape = ps.value(id).shape().to_vec();
            *ps.value_mut(id) = Tensor::zeros(shape);
        }
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(rand_rows(&mut rng(23), 2, 6 + META_WIDTH));
        let out = dec.decode(&mut g, &p, feats).unwrap();
        assert_eq!(
            g.value(out.endpoints).data(),
            g.value(out.endpoints_raw).data()
        );
        assert!(g.value(out.offsets.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_interp_mlp_zeroes_intermediate_steps_only() {
        let (mut ps, dec) = build(6, 2, 5, HeadKind::Static, true, 43);
        for id in dec.interp_mlp.as_ref().unwrap().param_ids() {
            let shape = ps.value(id).shape().to_vec();
            *ps.value_mut(id) = Tensor::zeros(shape);
        }
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(rand_rows(&mut rng(29), 2, 6 + META_WIDTH));
        let out = dec.decode(&mut g, &p, feats).unwrap();
        let traj = g.value(out.trajectories).data();
        let ends = g.value(out.endpoints).data();
        for row in 0..4 {
            for step in 0..4 {
                assert_eq!(traj[(row * 5 + step) * 2], 0.0);
                assert_eq!(traj[(row * 5 + step) * 2 + 1], 0.0);
            }
            assert_eq!(traj[(row * 5 + 4) * 2], ends[row * 2]);
            assert_eq!(traj[(row * 5 + 4) * 2 + 1], ends[row * 2 + 1]);
        }
    }

    #[test]
    fn final_step_equals_refined_endpoint_exactly() {
        let (ps, dec) = build(8, 4, 7, HeadKind::Adaptive, true, 47);
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(rand_rows(&mut rng(31), 3, 8 + META_WIDTH));
        let out = dec.decode(&mut g, &p, feats).unwrap();
        let traj = g.value(out.trajectories).data();
        let ends = g.value(out.endpoints).data();
        for row in 0..12 {
            assert_eq!(traj[(row * 7 + 6) * 2], ends[row * 2]);
            assert_eq!(traj[(row * 7 + 6) * 2 + 1], ends[row * 2 + 1]);
        }
    }

    #[test]
    fn single_mode_scores_one_and_single_step_trajectory() {
        let (ps, dec) = build(6, 1, 1, HeadKind::Static, true, 53);
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(rand_rows(&mut rng(37), 2, 6 + META_WIDTH));
        let out = dec.decode(&mut g, &p, feats).unwrap();
        assert_eq!(g.value(out.scores).data(), &[1.0, 1.0]);
        assert_eq!(g.shape(out.trajectories), &[2, 1, 2]);
        assert_eq!(
            g.value(out.trajectories).data(),
            g.value(out.endpoints).data()
        );
    }

    #[test]
    fn scores_are_normalized() {
        let (ps, dec) = build(8, 5, 4, HeadKind::Adaptive, true, 59);
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(rand_rows(&mut rng(41), 3, 8 + META_WIDTH));
        let out = dec.decode(&mut g, &p, feats).unwrap();
        let scores = g.value(out.scores).data();
        for agent in 0..3 {
            let sum: f64 = scores[agent * 5..(agent + 1) * 5].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    /// Sum of |grad| over a component's parameters; `None` grads count as 0.
    fn grad_mass(g: &Graph<f64>, p: &[TensorId], ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|id| match g.grad(p[id.index()]) {
                Some(t) => t.data().iter().map(|v| v.abs()).sum::<f64>(),
                None => 0.0,
            })
            .sum()
    }

    #[test]
    fn refinement_conditioning_stops_gradient_to_endpoint_head() {
        let (ps, dec) = build(6, 3, 4, HeadKind::Static, true, 61);
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(rand_rows(&mut rng(43), 2, 6 + META_WIDTH));
        let out = dec.decode(&mut g, &p, feats).unwrap();
        let loss = g.sum(out.offsets.unwrap());
        g.backward(loss).unwrap();
        assert_eq!(grad_mass(&g, &p, &dec.head.param_ids()), 0.0);
        assert!(grad_mass(&g, &p, &dec.refine_mlp.param_ids()) > 0.0);
    }

    #[test]
    fn score_path_stops_gradient_to_refine_mlp() {
        let (ps, dec) = build(6, 3, 4, HeadKind::Static, true, 67);
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(rand_rows(&mut rng(47), 2, 6 + META_WIDTH));
        let out = dec.decode(&mut g, &p, feats).unwrap();
        // Random weighting keeps the probe generic: a plain sum of softmax
        // rows has an identically zero derivative.
        let w = g.constant(rand_rows(&mut rng(48), 2, 3));
        let weighted = g.mul(out.scores, w).unwrap();
        let loss = g.sum(weighted);
        g.backward(loss).unwrap();
        assert_eq!(grad_mass(&g, &p, &dec.refine_mlp.param_ids()), 0.0);
        assert_eq!(grad_mass(&g, &p, &dec.head.param_ids()), 0.0);
        assert!(grad_mass(&g, &p, &dec.score_mlp.param_ids()) > 0.0);
    }

    #[test]
    fn intermediate_steps_stop_gradient_but_final_step_reaches_head() {
        let (ps, dec) = build(6, 2, 5, HeadKind::Static, true, 71);
        let run = |final_step: bool| {
            let mut g = Graph::new();
            let p = ps.register(&mut g);
            let feats = g.constant(rand_rows(&mut rng(53), 2, 6 + META_WIDTH));
            let out = dec.decode(&mut g, &p, feats).unwrap();
            let part = if final_step {
                g.slice(out.trajectories, 1, 4, 1).unwrap()
            } else {
                g.slice(out.trajectories, 1, 0, 4).unwrap()
            };
            let loss = g.sum(part);
            g.backward(loss).unwrap();
            grad_mass(&g, &p, &dec.head.param_ids())
        };
        assert_eq!(run(false), 0.0);
        assert!(run(true) > 0.0);
    }

    #[test]
    fn without_stop_gradient_conditioning_paths_reach_head() {
        let (ps, dec) = build(6, 3, 4, HeadKind::Static, false, 73);
        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(rand_rows(&mut rng(59), 2, 6 + META_WIDTH));
        let out = dec.decode(&mut g, &p, feats).unwrap();
        let loss = g.sum(out.offsets.unwrap());
        g.backward(loss).unwrap();
        assert!(grad_mass(&g, &p, &dec.head.param_ids()) > 0.0);
    }

    #[test]
    fn decode_matches_manual_composition_bitwise() {
        let (ps, dec) = build(6, 3, 4, HeadKind::Adaptive, true, 79);
        let feats_t = rand_rows(&mut rng(61), 2, 6 + META_WIDTH);

        let mut g = Graph::new();
        let p = ps.register(&mut g);
        let feats = g.constant(feats_t.clone());
        let out = dec.decode(&mut g, &p, feats).unwrap();

        let mut g2 = Graph::new();
        let p2 = ps.register(&mut g2);
        let feats2 = g2.constant(feats_t);
        let rows = dec.expand_modes(&mut g2, &p2, feats2).unwrap();
        let raw = dec.head_endpoints(&mut g2, &p2, rows).unwrap();
        let cond1 = g2.detach(raw);
        let offsets = dec.refine_offsets(&mut g2, &p2, rows, cond1).unwrap();
        let refined = g2.add(raw, offsets).unwrap();
        let cond2 = g2.detach(refined);
        let traj = dec
            .interpolate(&mut g2, &p2, rows, cond2, refined)
            .unwrap();
        let scores = dec.score(&mut g2, &p2, rows, cond2, 2).unwrap();

        assert_eq!(g.value(out.endpoints).data(), g2.value(refined).data());
        assert_eq!(g.value(out.trajectories).data(), g2.value(traj).data());
        assert_eq!(g.value(out.scores).data(), g2.value(scores).data());
    }
}
