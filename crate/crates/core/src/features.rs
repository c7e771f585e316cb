//! The learned trunk: subspace coding, attention embedding, matchability,
//! projection for matching, and the pose-regression head.
//!
//! Feature matrices hold one row per line. Linear layers act on rows,
//! `Y = X W + b` with `W` of shape `in × out`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ot::{MatchWeightMatrix, SinkhornConfig};
use crate::plucker::{PluckerLine, RigidTransform};

pub const SINKHORN_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub knn_k: usize,
    pub edge_conv_dim: usize,
    /// Layer widths including the input width, which must equal `edge_conv_dim`.
    pub subspace_mlp: Vec<usize>,
    /// Starts at twice the last subspace width and ends at `feat_dim`.
    pub fuse_mlp: Vec<usize>,
    pub depth: usize,
    pub heads: usize,
    pub feat_dim: usize,
    pub groupnorm_groups: usize,
    /// Scale attention logits by `1/√D` instead of `1/√(D/heads)`.
    #[serde(default)]
    pub literal_attention_scale: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl NetConfig {
    pub fn full() -> Self {
        Self {
            knn_k: 10,
            edge_conv_dim: 8,
            subspace_mlp: vec![8, 16, 32, 64],
            fuse_mlp: vec![128, 128, 128],
            depth: 12,
            heads: 4,
            feat_dim: 128,
            groupnorm_groups: 8,
            literal_attention_scale: false,
        }
    }

    pub fn desk() -> Self {
        Self {
            fuse_mlp: vec![128, 64, 32],
            depth: 4,
            heads: 2,
            feat_dim: 32,
            ..Self::full()
        }
    }

    pub fn tiny() -> Self {
        Self {
            knn_k: 3,
            edge_conv_dim: 4,
            subspace_mlp: vec![4, 8],
            fuse_mlp: vec![16, 8],
            depth: 2,
            heads: 2,
            feat_dim: 8,
            groupnorm_groups: 8,
            literal_attention_scale: false,
        }
    }

    pub fn groups_for(&self, width: usize) -> usize {
        self.groupnorm_groups.min(width)
    }

    pub fn update_mlp(&self) -> Vec<usize> {
        let d = self.feat_dim;
        vec![2 * d, 2 * d, d]
    }

    pub fn matchability_mlp(&self) -> Vec<usize> {
        let d = self.feat_dim;
        vec![3 * d, 2 * d, 2 * d, d, 1]
    }

    pub fn regression_mlp(&self) -> Vec<usize> {
        let d = self.feat_dim;
        vec![2 * d, d, d, d / 2, d / 2, 7]
    }

    /// The head sees one pooled row, so a GroupNorm group needs two or more channels to carry signal.
    pub fn check_regression_head(&self) -> Result<()> {
        let sizes = self.regression_mlp();
        for &w in &sizes[1..sizes.len() - 1] {
            if w / self.groups_for(w) < 2 {
                return Err(Error::Config(format!(
                    "regression head: width {w} gives single-channel GroupNorm groups, so its output is constant; use a larger feat_dim or fewer groups"
                )));
            }
        }
        Ok(())
    }

    fn check_mlp(&self, name: &str, sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("{name}: needs at least two positive widths")));
        }
        for &w in &sizes[1..sizes.len() - 1] {
            if w % self.groups_for(w) != 0 {
                return Err(Error::Config(format!("{name}: width {w} not divisible into groups")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feat_dim;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("feat_dim {d} not divisible by {} heads", self.heads)));
        }
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(Error::Config(format!("depth must be even and positive, got {}", self.depth)));
        }
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config("feat_dim must be even".into()));
        }
        if self.knn_k == 0 || self.groupnorm_groups == 0 {
            return Err(Error::Config("knn_k and groupnorm_groups must be positive".into()));
        }
        let ec = self.edge_conv_dim;
        if ec % self.groups_for(ec) != 0 {
            return Err(Error::Config(format!("edge_conv_dim {ec} not divisible into groups")));
        }
        if self.subspace_mlp.first() != Some(&ec) {
            return Err(Error::Config("subspace_mlp must start at edge_conv_dim".into()));
        }
        let sub_out = *self.subspace_mlp.last().unwrap_or(&0);
        if self.fuse_mlp.first() != Some(&(2 * sub_out)) || self.fuse_mlp.last() != Some(&d) {
            return Err(Error::Config("fuse_mlp must map 2x subspace width to feat_dim".into()));
        }
        self.check_mlp("subspace_mlp", &self.subspace_mlp)?;
        self.check_mlp("fuse_mlp", &self.fuse_mlp)?;
        self.check_mlp("update", &self.update_mlp())?;
        self.check_mlp("matchability", &self.matchability_mlp())?;
        self.check_mlp("regression", &self.regression_mlp())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier(usize, usize),
    Zeros,
    Ones,
}

fn mlp_layout(out: &mut Vec<(String, usize, usize, Init)>, prefix: &str, sizes: &[usize]) {
    for l in 0..sizes.len() - 1 {
        let (i, o) = (sizes[l], sizes[l + 1]);
        out.push((format!("{prefix}.{l}.w"), i, o, Init::Xavier(i, o)));
        out.push((format!("{prefix}.{l}.b"), 1, o, Init::Zeros));
        if l + 2 < sizes.len() {
            out.push((format!("{prefix}.{l}.gn_gamma"), 1, o, Init::Ones));
            out.push((format!("{prefix}.{l}.gn_beta"), 1, o, Init::Zeros));
        }
    }
}

fn layout(cfg: &NetConfig) -> Vec<(String, usize, usize, Init)> {
    let mut out = Vec::new();
    let ec = cfg.edge_conv_dim;
    for branch in ["dir", "mom"] {
        out.push((format!("{branch}.edge.theta"), 3, ec, Init::Xavier(3, ec)));
        out.push((format!("{branch}.edge.phi"), 3, ec, Init::Xavier(3, ec)));
        out.push((format!("{branch}.edge.gn_gamma"), 1, ec, Init::Ones));
        out.push((format!("{branch}.edge.gn_beta"), 1, ec, Init::Zeros));
        mlp_layout(&mut out, &format!("{branch}.mlp"), &cfg.subspace_mlp);
    }
    mlp_layout(&mut out, "fuse", &cfg.fuse_mlp);
    let d = cfg.feat_dim;
    for t in 0..cfg.depth {
        for p in ["q", "k", "v"] {
            out.push((format!("attn.{t}.{p}.w"), d, d, Init::Xavier(d, d)));
            out.push((format!("attn.{t}.{p}.b"), 1, d, Init::Zeros));
        }
        mlp_layout(&mut out, &format!("attn.{t}.update"), &cfg.update_mlp());
    }
    mlp_layout(&mut out, "match", &cfg.matchability_mlp());
    out.push(("proj.w".into(), d, d, Init::Xavier(d, d)));
    out.push(("proj.b".into(), 1, d, Init::Zeros));
    mlp_layout(&mut out, "reg", &cfg.regression_mlp());
    out
}

/// Every trainable tensor of the network, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkParams {
    pub config: NetConfig,
    pub tensors: BTreeMap<String, DMatrix<f64>>,
}

impl TrunkParams {
    /// Xavier-uniform weights, zero biases, unit GroupNorm scales.
    pub fn init(config: &NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, r, c, init) in layout(config) {
            let m = match init {
                Init::Xavier(fi, fo) => {
                    let a = (6.0 / (fi + fo) as f64).sqrt();
                    DMatrix::from_fn(r, c, |_, _| rng.random_range(-a..a))
                }
                Init::Zeros => DMatrix::zeros(r, c),
                Init::Ones => DMatrix::from_element(r, c, 1.0),
            };
            tensors.insert(name, m);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Expected `(rows, cols)` for every tensor name under `config`.
    pub fn expected_shapes(config: &NetConfig) -> BTreeMap<String, (usize, usize)> {
        layout(config).into_iter().map(|(n, r, c, _)| (n, (r, c))).collect()
    }

    /// Builds parameters from named tensors, rejecting missing, extra, or misshapen entries.
    pub fn from_tensors(config: &NetConfig, tensors: BTreeMap<String, DMatrix<f64>>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(config);
        for (name, &(r, c)) in &expected {
            let Some(t) = tensors.get(name) else {
                return Err(Error::Config(format!("checkpoint lacks tensor `{name}`")));
            };
            if t.shape() != (r, c) {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: (r, c),
                    found: t.shape(),
                });
            }
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("tensor `{name}` has non-finite entries")));
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> &DMatrix<f64> {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut DMatrix<f64> {
        self.tensors.get_mut(name).expect("unknown tensor")
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnnMetric {
    Angular,
    Euclidean,
}

fn metric_distance(metric: KnnMetric, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    match metric {
        KnnMetric::Angular => a.dot(b).clamp(-1.0, 1.0).acos(),
        KnnMetric::Euclidean => (a - b).norm(),
    }
}

/// The `k` nearest other values of every anchor, closest first, lower index on ties.
pub fn knn_graph(values: &[Vector3<f64>], metric: KnnMetric, k: usize) -> Result<Vec<Vec<usize>>> {
    if values.len() <= k {
        return Err(Error::TooFewLines {
            needed: k + 1,
            got: values.len(),
        });
    }
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut cand: Vec<(f64, usize)> = values
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, b)| (metric_distance(metric, a, b), j))
                .collect();
            cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            cand.truncate(k);
            cand.into_iter().map(|c| c.1).collect()
        })
        .collect())
}

fn rows_of(values: &[Vector3<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(values.len(), 3, |i, j| values[i][j])
}

/// `(A O − O)` where `A` averages over each anchor's neighbors.
fn neighbor_offsets(values: &[Vector3<f64>], neighbors: &[Vec<usize>]) -> DMatrix<f64> {
    DMatrix::from_fn(values.len(), 3, |i, c| {
        let nb = &neighbors[i];
        nb.iter().map(|&k| values[k][c] - values[i][c]).sum::<f64>() / nb.len() as f64
    })
}

/// `E(o_i) = mean_k θ(o_k − o_i) + φ o_i`, with `θ`, `φ` of shape `3 × channels`.
pub fn edge_conv(
    values: &[Vector3<f64>],
    neighbors: &[Vec<usize>],
    theta: &DMatrix<f64>,
    phi: &DMatrix<f64>,
) -> DMatrix<f64> {
    neighbor_offsets(values, neighbors) * theta + rows_of(values) * phi
}

/// Forward pass state: a tape plus lazily registered parameter leaves.
pub struct Forward<'a> {
    pub tape: Tape,
    params: &'a TrunkParams,
    vars: BTreeMap<&'a str, Var>,
    trainable: bool,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a TrunkParams, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            vars: BTreeMap::new(),
            trainable,
        }
    }

    fn cfg(&self) -> &'a NetConfig {
        &self.params.config
    }

    pub fn p(&mut self, name: &str) -> Var {
        let params: &'a TrunkParams = self.params;
        let (key, value) = params
            .tensors
            .get_key_value(name)
            .unwrap_or_else(|| panic!("unknown tensor `{name}`"));
        if let Some(v) = self.vars.get(key.as_str()) {
            return *v;
        }
        let v = if self.trainable {
            self.tape.param(value.clone())
        } else {
            self.tape.constant(value.clone())
        };
        self.vars.insert(key.as_str(), v);
        v
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    fn norm_act(&mut self, x: Var, prefix: &str) -> Var {
        let width = self.tape.value(x).ncols();
        let g = self.p(&format!("{prefix}.gn_gamma"));
        let b = self.p(&format!("{prefix}.gn_beta"));
        let y = self.tape.group_norm(x, g, b, self.cfg().groups_for(width));
        self.tape.gelu(y)
    }

    fn mlp(&mut self, mut x: Var, prefix: &str, sizes: &[usize]) -> Var {
        let layers = sizes.len() - 1;
        for l in 0..layers {
            x = self.linear(x, &format!("{prefix}.{l}"));
            if l + 1 < layers {
                x = self.norm_act(x, &format!("{prefix}.{l}"));
            }
        }
        x
    }

    fn branch(&mut self, values: &[Vector3<f64>], metric: KnnMetric, name: &str) -> Result<Var> {
        let nb = knn_graph(values, metric, self.cfg().knn_k)?;
        let offsets = self.tape.constant(neighbor_offsets(values, &nb));
        let anchors = self.tape.constant(rows_of(values));
        let theta = self.p(&format!("{name}.edge.theta"));
        let phi = self.p(&format!("{name}.edge.phi"));
        let a = self.tape.matmul(offsets, theta);
        let b = self.tape.matmul(anchors, phi);
        let e = self.tape.add(a, b);
        let e = self.norm_act(e, &format!("{name}.edge"));
        Ok(self.mlp(e, &format!("{name}.mlp"), &self.cfg().subspace_mlp.clone()))
    }

    /// Per-line features from the direction and moment subspaces.
    pub fn subspace_encode(&mut self, lines: &[PluckerLine]) -> Result<Var> {
        let dirs: Vec<_> = lines.iter().map(|l| l.direction()).collect();
        let moms: Vec<_> = lines.iter().map(|l| l.moment()).collect();
        let fd = self.branch(&dirs, KnnMetric::Angular, "dir")?;
        let fm = self.branch(&moms, KnnMetric::Euclidean, "mom")?;
        let f = self.tape.concat_cols(&[fd, fm]);
        Ok(self.mlp(f, "fuse", &self.cfg().fuse_mlp.clone()))
    }

    /// Multi-head attention message from `keys` to every row of `queries`.
    /// Returns the message and the attention weights of each head.
    pub fn attend(&mut self, queries: Var, keys: Var, layer: usize) -> (Var, Vec<Var>) {
        let cfg = self.cfg();
        let (d, heads) = (cfg.feat_dim, cfg.heads);
        let dh = d / heads;
        let scale = if cfg.literal_attention_scale {
            1.0 / (d as f64).sqrt()
        } else {
            1.0 / (dh as f64).sqrt()
        };
        let q = self.linear(queries, &format!("attn.{layer}.q"));
        let k = self.linear(keys, &format!("attn.{layer}.k"));
        let v = self.linear(keys, &format!("attn.{layer}.v"));
        let mut parts = Vec::with_capacity(heads);
        let mut alphas = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let s = self.tape.matmul_t(qh, kh);
            let s = self.tape.scale(s, scale);
            let a = self.tape.softmax_rows(s);
            parts.push(self.tape.matmul(a, vh));
            alphas.push(a);
        }
        (self.tape.concat_cols(&parts), alphas)
    }

    /// Alternating self (odd layers, counting from one) and cross attention.
    pub fn attention_embed(&mut self, mut fs: Var, mut ft: Var) -> (Var, Var) {
        let sizes = self.cfg().update_mlp();
        for t in 0..self.cfg().depth {
            let self_layer = t % 2 == 0;
            let (ks, kt) = if self_layer { (fs, ft) } else { (ft, fs) };
            let (ms, _) = self.attend(fs, ks, t);
            let (mt, _) = self.attend(ft, kt, t);
            let prefix = format!("attn.{t}.update");
            let xs = self.tape.concat_cols(&[fs, ms]);
            let us = self.mlp(xs, &prefix, &sizes);
            let xt = self.tape.concat_cols(&[ft, mt]);
            let ut = self.mlp(xt, &prefix, &sizes);
            fs = self.tape.add(fs, us);
            ft = self.tape.add(ft, ut);
        }
        (fs, ft)
    }

    /// Matchability histogram over the rows of `f_self`, as a column vector.
    pub fn matchability(&mut self, f_self: Var, f_cross: Var) -> Var {
        let n = self.tape.value(f_self).nrows();
        let avg = self.tape.mean_rows(f_cross);
        let mx = self.tape.max_rows(f_cross);
        let avg = self.tape.broadcast_rows(avg, n);
        let mx = self.tape.broadcast_rows(mx, n);
        let x = self.tape.concat_cols(&[f_self, avg, mx]);
        let logits = self.mlp(x, "match", &self.cfg().matchability_mlp());
        let row = self.tape.transpose(logits);
        let probs = self.tape.softmax_rows(row);
        self.tape.transpose(probs)
    }

    pub fn project(&mut self, f: Var) -> Result<Var> {
        let y = self.linear(f, "proj");
        self.tape.normalize_rows(y)
    }

    /// Unrolled Sinkhorn scaling; `r`, `s` are column vectors.
    pub fn sinkhorn(&mut self, h: Var, r: Var, s: Var, cfg: &SinkhornConfig) -> Result<Var> {
        let t = &mut self.tape;
        let neg = t.scale(h, -1.0 / cfg.lambda);
        let ups = t.exp(neg);
        let total = t.sum(ups);
        let ups = t.div_scalar(ups, total);
        let ups_t = t.transpose(ups);
        let n = t.value(ups).ncols();
        let mut b = t.constant(DMatrix::from_element(n, 1, 1.0));
        let mut a = b;
        for _ in 0..cfg.iterations {
            let ub = t.matmul(ups, b);
            check_floor(t.value(ub))?;
            a = t.div(r, ub);
            let ua = t.matmul(ups_t, a);
            check_floor(t.value(ua))?;
            b = t.div(s, ua);
        }
        let outer = t.matmul_t(a, b);
        Ok(t.mul(ups, outer))
    }

    /// Everything from lines to the match matrix.
    pub fn match_scene(
        &mut self,
        src: &[PluckerLine],
        dst: &[PluckerLine],
        sinkhorn: &SinkhornConfig,
    ) -> Result<MatchForward> {
        let fs0 = self.subspace_encode(src)?;
        let ft0 = self.subspace_encode(dst)?;
        let (fs, ft) = self.attention_embed(fs0, ft0);
        let r = self.matchability(fs, ft);
        let s = self.matchability(ft, fs);
        let xs = self.project(fs)?;
        let xt = self.project(ft)?;
        let h = self.tape.pairwise_dist(xs, xt);
        let w = self.sinkhorn(h, r, s, sinkhorn)?;
        Ok(MatchForward { fs, ft, r, s, h, w })
    }

    /// Pose from globally pooled trunk features: canonical quaternion and translation.
    pub fn regression_head(&mut self, fs: Var, ft: Var) -> Result<(Var, Var)> {
        let ms = self.tape.max_rows(fs);
        let mt = self.tape.max_rows(ft);
        let x = self.tape.concat_cols(&[ms, mt]);
        let out = self.mlp(x, "reg", &self.cfg().regression_mlp());
        let q = self.tape.slice_cols(out, 0, 4);
        let q = self.tape.normalize_rows(q)?;
        let q = if self.tape.value(q)[(0, 0)] < 0.0 {
            self.tape.scale(q, -1.0)
        } else {
            q
        };
        let t = self.tape.slice_cols(out, 4, 3);
        Ok((q, t))
    }

    pub fn regress_scene(&mut self, src: &[PluckerLine], dst: &[PluckerLine]) -> Result<(Var, Var)> {
        let fs0 = self.subspace_encode(src)?;
        let ft0 = self.subspace_encode(dst)?;
        let (fs, ft) = self.attention_embed(fs0, ft0);
        self.regression_head(fs, ft)
    }

    /// Named parameter gradients of `loss`; tensors the loss does not touch get zeros.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, DMatrix<f64>>> {
        let grads: Gradients = self.tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, t) in &self.params.tensors {
            let g = self
                .vars
                .get(name.as_str())
                .and_then(|v| grads.get(*v).cloned())
                .unwrap_or_else(|| DMatrix::zeros(t.nrows(), t.ncols()));
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn check_floor(m: &DMatrix<f64>) -> Result<()> {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    if !(lo >= SINKHORN_FLOOR) {
        return Err(Error::NumericalUnderflow(lo));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct MatchForward {
    pub fs: Var,
    pub ft: Var,
    pub r: Var,
    pub s: Var,
    pub h: Var,
    pub w: Var,
}

/// Value-level results of matching one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMatch {
    pub w: MatchWeightMatrix,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
}

pub fn subspace_encode(lines: &[PluckerLine], params: &TrunkParams) -> Result<DMatrix<f64>> {
    let mut f = Forward::new(params, false);
    let v = f.subspace_encode(lines)?;
    Ok(f.tape.value(v).clone())
}

pub fn attention_embed(
    fs: &DMatrix<f64>,
    ft: &DMatrix<f64>,
    params: &TrunkParams,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut f = Forward::new(params, false);
    let (a, b) = (f.tape.constant(fs.clone()), f.tape.constant(ft.clone()));
    let (a, b) = f.attention_embed(a, b);
    (f.tape.value(a).clone(), f.tape.value(b).clone())
}

pub fn matchability(f_self: &DMatrix<f64>, f_cross: &DMatrix<f64>, params: &TrunkParams) -> Vec<f64> {
    let mut f = Forward::new(params, false);
    let (a, b) = (f.tape.constant(f_self.clone()), f.tape.constant(f_cross.clone()));
    let r = f.matchability(a, b);
    f.tape.value(r).iter().copied().collect()
}

pub fn project_for_matching(feat: &DMatrix<f64>, params: &TrunkParams) -> Result<DMatrix<f64>> {
    let mut f = Forward::new(params, false);
    let a = f.tape.constant(feat.clone());
    let y = f.project(a)?;
    Ok(f.tape.value(y).clone())
}

pub fn regression_head(fs: &DMatrix<f64>, ft: &DMatrix<f64>, params: &TrunkParams) -> Result<RigidTransform> {
    let mut f = Forward::new(params, false);
    let (a, b) = (f.tape.constant(fs.clone()), f.tape.constant(ft.clone()));
    let (q, t) = f.regression_head(a, b)?;
    Ok(pose_from_outputs(f.tape.value(q), f.tape.value(t)))
}

fn pose_from_outputs(q: &DMatrix<f64>, t: &DMatrix<f64>) -> RigidTransform {
    RigidTransform::from_quaternion(
        [q[(0, 0)], q[(0, 1)], q[(0, 2)], q[(0, 3)]],
        Vector3::new(t[(0, 0)], t[(0, 1)], t[(0, 2)]),
    )
}

/// Match matrix and matchability histograms for a line-set pair.
pub fn match_lines(
    src: &[PluckerLine],
    dst: &[PluckerLine],
    params: &TrunkParams,
    sinkhorn: &SinkhornConfig,
) -> Result<SceneMatch> {
    let mut f = Forward::new(params, false);
    let out = f.match_scene(src, dst, sinkhorn)?;
    let t = &f.tape;
    Ok(SceneMatch {
        w: MatchWeightMatrix(t.value(out.w).clone()),
        r: t.value(out.r).iter().copied().collect(),
        s: t.value(out.s).iter().copied().collect(),
    })
}

pub fn regress_pose(src: &[PluckerLine], dst: &[PluckerLine], params: &TrunkParams) -> Result<RigidTransform> {
    let mut f = Forward::new(params, false);
    let (q, t) = f.regress_scene(src, dst)?;
    Ok(pose_from_outputs(f.tape.value(q), f.tape.value(t)))
}

/// Matching loss of one scene and its parameter gradients.
pub fn matching_loss_and_grad(
    params: &TrunkParams,
    src: &[PluckerLine],
    dst: &[PluckerLine],
    truth: &[Vec<bool>],
    sinkhorn: &SinkhornConfig,
) -> Result<(f64, BTreeMap<String, DMatrix<f64>>)> {
    let mut f = Forward::new(params, true);
    let out = f.match_scene(src, dst, sinkhorn)?;
    let loss = f.tape.match_loss(out.w, truth)?;
    Ok((f.tape.scalar(loss), f.gradients(loss)?))
}

/// `‖t_gt − t‖ + ‖q_gt − q‖` for one scene and its parameter gradients.
pub fn regression_loss_and_grad(
    params: &TrunkParams,
    src: &[PluckerLine],
    dst: &[PluckerLine],
    gt: &RigidTransform,
) -> Result<(f64, BTreeMap<String, DMatrix<f64>>)> {
    let mut f = Forward::new(params, true);
    let (q, t) = f.regress_scene(src, dst)?;
    let qg = f.tape.constant(DMatrix::from_row_slice(1, 4, &gt.quaternion()));
    let tg = f.tape.constant(DMatrix::from_row_slice(1, 3, gt.translation.as_slice()));
    let dq = f.tape.sub(q, qg);
    let dt = f.tape.sub(t, tg);
    let nq = f.tape.norm(dq);
    let nt = f.tape.norm(dt);
    let loss = f.tape.add(nq, nt);
    Ok((f.tape.scalar(loss), f.gradients(loss)?))
}
