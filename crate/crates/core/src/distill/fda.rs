use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::ParamId;
use crate::{Graph, NodeId, ParamStore, Tensor, TensorError};

/// Teacher outputs for one batch: per teacher, `[N, d_m]` mediators and
/// `[N, d]` target-item embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    pub mediators: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

/// How teacher features are pooled for the feature target and for the
/// in-batch `m_j` of the front-door estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Plain mean over teachers.
    Vanilla,
    /// `pz`-weighted mean over teachers.
    Bda,
}

impl std::str::FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(FeatureMode::Vanilla),
            "bda" => Ok(FeatureMode::Bda),
            other => Err(format!("unknown feature mode {other:?} (expected vanilla or bda)")),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FeatureMode::Vanilla => "vanilla",
            FeatureMode::Bda => "bda",
        })
    }
}

/// `sum_k pz_k * features_k`.
pub fn bda_mediator(features: &[Tensor], pz: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(features[0].shape());
    for (f, &w) in features.iter().zip(pz) {
        for (o, &x) in out.data_mut().iter_mut().zip(f.data()) {
            *o += w * x;
        }
    }
    out
}

/// Pooled teacher feature under `mode`.
pub fn pooled_feature(features: &[Tensor], pz: &[f64], mode: FeatureMode) -> Tensor {
    match mode {
        FeatureMode::Bda => bda_mediator(features, pz),
        FeatureMode::Vanilla => {
            let uniform = vec![1.0 / features.len() as f64; features.len()];
            bda_mediator(features, &uniform)
        }
    }
}

/// Attention matrices `W1`, `W2` and the one-hidden-layer scorer
/// `psi_fda([m_j, m_ki, y_i])`.
///
/// The scorer's first layer is stored split by input block (`a` for `m_j`,
/// `b` for `m_ki`, `c` for `y_i`) so the in-batch mean over `j` can use the
/// fused pairwise op.
#[derive(Debug, Clone)]
pub struct FdaHead {
    pub store: ParamStore,
    w1: ParamId,
    w2: ParamId,
    a: ParamId,
    b: ParamId,
    c: ParamId,
    b1: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Nodes produced by [`FdaHead::build`].
#[derive(Debug, Clone)]
pub struct FdaNodes {
    /// `[N, K]` attention over teachers.
    pub alpha: NodeId,
    /// `[N, K]` in-batch expectations per teacher.
    pub per_teacher: NodeId,
    /// `[N, 1]` front-door label.
    pub o_tilde: NodeId,
    pub params: Vec<(String, NodeId)>,
}

impl FdaHead {
    pub fn new(mediator_dim: usize, item_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (dm, d, h) = (mediator_dim, item_dim, hidden);
        let w1 = store.add_uniform("fda.w1", &[dm, dm], &mut rng);
        let w2 = store.add_uniform("fda.w2", &[dm, dm], &mut rng);
        let a = store.add_uniform("fda.psi.a", &[dm, h], &mut rng);
        let b = store.add_uniform("fda.psi.b", &[dm, h], &mut rng);
        let c = store.add_uniform("fda.psi.c", &[d, h], &mut rng);
        let b1 = store.add_uniform("fda.psi.b1", &[h], &mut rng);
        let out_w = store.add_uniform("fda.psi.out_w", &[h, 1], &mut rng);
        let out_b = store.add_uniform("fda.psi.out_b", &[1], &mut rng);
        FdaHead {
            store,
            w1,
            w2,
            a,
            b,
            c,
            b1,
            out_w,
            out_b,
        }
    }

    /// Scorer input width, `2 * d_m + d`.
    pub fn input_dim(&self) -> usize {
        let s = |id| self.store.get(id).rows();
        s(self.a) + s(self.b) + s(self.c)
    }

    /// Adds the front-door label for a batch to `g`.
    ///
    /// `j_side` is the `[N, d_m]` teacher feature used for the in-batch
    /// samples `x_j`. `student_mediator` enters the attention detached.
    pub fn build(
        &self,
        g: &mut Graph,
        teachers: &TeacherOutputs,
        j_side: &Tensor,
        student_mediator: NodeId,
    ) -> Result<FdaNodes, TensorError> {
        let mut params = Vec::new();
        let mut p = |g: &mut Graph, id: ParamId, name: &str| {
            let n = g.param(&self.store, id);
            params.push((name.to_string(), n));
            n
        };
        let w1 = p(g, self.w1, "fda.w1");
        let w2 = p(g, self.w2, "fda.w2");
        let a = p(g, self.a, "fda.psi.a");
        let b = p(g, self.b, "fda.psi.b");
        let c = p(g, self.c, "fda.psi.c");
        let b1 = p(g, self.b1, "fda.psi.b1");
        let out_w = p(g, self.out_w, "fda.psi.out_w");
        let out_b = p(g, self.out_b, "fda.psi.out_b");

        let m_hat = g.detach(student_mediator)?;
        let query = g.matmul(m_hat, w2)?;
        let js = g.constant(j_side.clone());
        let left = g.matmul(js, a)?;
        let mut logits = Vec::with_capacity(teachers.mediators.len());
        let mut expectations = Vec::with_capacity(teachers.mediators.len());
        for (med, tgt) in teachers.mediators.iter().zip(&teachers.targets) {
            let m = g.constant(med.clone());
            let y = g.constant(tgt.clone());
            let key = g.matmul(m, w1)?;
            let prod = g.mul(key, query)?;
            logits.push(g.row_sum(prod)?);
            let mb = g.matmul(m, b)?;
            let yc = g.matmul(y, c)?;
            let right = g.add(mb, yc)?;
            let right = g.add_bias(right, b1)?;
            expectations.push(g.pairwise_mlp_mean(left, right, out_w, out_b)?);
        }
        let logits = g.concat(&logits)?;
        let alpha = g.softmax(logits)?;
        let per_teacher = g.concat(&expectations)?;
        let weighted = g.mul(alpha, per_teacher)?;
        let o_tilde = g.row_sum(weighted)?;
        Ok(FdaNodes {
            alpha,
            per_teacher,
            o_tilde,
            params,
        })
    }

    /// Parameter values by name, for tests and checkpoints.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.store.to_named()
    }
}

/// Attention of each instance over teachers, as plain values.
pub fn attention_weights(
    head: &FdaHead,
    teachers: &TeacherOutputs,
    student_mediator: &Tensor,
) -> Result<Tensor, TensorError> {
    let mut g = Graph::new();
    let s = g.constant(student_mediator.clone());
    let nodes = head.build(&mut g, teachers, &teachers.mediators[0], s)?;
    Ok(g.value(nodes.alpha).clone())
}

/// Front-door labels `o_tilde` for a batch, as plain values.
pub fn fda_label(
    head: &FdaHead,
    teachers: &TeacherOutputs,
    j_side: &Tensor,
    student_mediator: &Tensor,
) -> Result<Vec<f64>, TensorError> {
    if j_side.rows() == 0 {
        return Err(TensorError::Shape {
            node: 0,
            op: "fda_label",
            detail: "empty batch".into(),
        });
    }
    let mut g = Graph::new();
    let s = g.constant(student_mediator.clone());
    let nodes = head.build(&mut g, teachers, j_side, s)?;
    Ok(g.value(nodes.o_tilde).data().to_vec())
}

/// `(distill, consistency)`: BCE of the student prediction against the
/// detached front-door label, and BCE of the front-door label against the
/// observed labels.
pub fn fda_loss(
    g: &mut Graph,
    o_tilde: NodeId,
    o_hat: NodeId,
    labels: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    let target = g.detach(o_tilde)?;
    let distill = g.bce(o_hat, target, None)?;
    let consistency = g.bce(o_tilde, labels, None)?;
    Ok((distill, consistency))
}

/// Mean over the batch of `||m_hat - guide||^2`; `guide` is a constant.
pub fn feature_distill_loss(
    g: &mut Graph,
    guide: &Tensor,
    m_hat: NodeId,
) -> Result<NodeId, TensorError> {
    let n = guide.rows().max(1) as f64;
    let gd = g.constant(guide.clone());
    let diff = g.sub(m_hat, gd)?;
    let sq = g.sum_squares(diff)?;
    g.scale(sq, 1.0 / n)
}
