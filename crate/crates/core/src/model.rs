//! The assembled matching pipeline and its ablation switches.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::consistency::{confidence_features, ConsistencyWeights};
use crate::error::Result;
use crate::features::{descriptor_input, handcrafted_descriptor, project_features, ProjectionWeights};
use crate::fusion::{dual_softmax, final_scores, matchability_matrix, matchability_scores, FusionHeadWeights};
use crate::geometry::{Point3, PointCloud, RigidTransform};
use crate::graph_embed::{embed, initial_scores, GcnnWeights};
use crate::reposition::{
    argmax_match, fuse_pair_features, warp_and_match, weighted_procrustes, BilateralMatch, FusionWeights,
    MatchSource,
};
use crate::weights::{BoundWeights, ModelConfig, ModelWeights};

/// Which pipeline components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub gcnn: bool,
    pub bi_match: bool,
    pub global_consistency: bool,
    pub reposition: bool,
}

impl AblationConfig {
    pub const FULL: AblationConfig = AblationConfig {
        gcnn: true,
        bi_match: true,
        global_consistency: true,
        reposition: true,
    };

    pub const VANILLA: AblationConfig = AblationConfig {
        gcnn: false,
        bi_match: false,
        global_consistency: false,
        reposition: false,
    };

    /// The five cumulative configurations (a) to (e).
    pub fn table() -> [(char, AblationConfig); 5] {
        let on = |g, b, c, r| AblationConfig {
            gcnn: g,
            bi_match: b,
            global_consistency: c,
            reposition: r,
        };
        [
            ('a', on(false, false, false, false)),
            ('b', on(true, false, false, false)),
            ('c', on(true, true, false, false)),
            ('d', on(true, true, true, false)),
            ('e', on(true, true, true, true)),
        ]
    }

    /// Whether the matchability branch (and hence bilateral matching) runs.
    pub fn uses_matchability(&self) -> bool {
        self.bi_match || self.global_consistency
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig::FULL
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |b: bool| if b { '+' } else { '-' };
        write!(
            f,
            "{}gcnn {}bi_match {}gc {}rep",
            flag(self.gcnn),
            flag(self.bi_match),
            flag(self.global_consistency),
            flag(self.reposition)
        )
    }
}

/// A cloud with its handcrafted descriptor computed once.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub descriptor: Tensor<f64>,
}

impl PreparedCloud {
    pub fn new(cloud: PointCloud, k_local: usize) -> Result<Self> {
        cloud.ensure_pipeline_ready("input")?;
        let descriptor = handcrafted_descriptor(&cloud, k_local)?;
        Ok(PreparedCloud { cloud, descriptor })
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// How the source is repositioned before bilateral matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WarpMode {
    /// Training: warp with the known motion.
    GroundTruth(RigidTransform),
    /// Inference: warp with the weighted Procrustes estimate from `Ŝ`.
    Estimate,
}

/// Handles and side products of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub s_hat: Var,
    /// Final score matrix (the dual softmax when no matchability is used).
    pub scores: Var,
    pub tau_x: Option<Var>,
    pub tau_y: Option<Var>,
    pub matches: Option<BilateralMatch>,
    pub match_source: Option<MatchSource>,
    /// The transform used for repositioning, when repositioning ran.
    pub warp: Option<RigidTransform>,
}

/// Every bound parameter group of the pipeline.
#[derive(Debug, Clone, Copy)]
pub struct PipelineWeights {
    pub projection: ProjectionWeights,
    pub gcnn: GcnnWeights,
    pub fusion_xy: FusionWeights,
    pub fusion_yx: FusionWeights,
    pub consistency: ConsistencyWeights,
    pub head_x: FusionHeadWeights,
    pub head_y: FusionHeadWeights,
}

impl PipelineWeights {
    pub fn bind(w: &BoundWeights) -> Result<Self> {
        let (fusion_xy, fusion_yx) = FusionWeights::bind(w)?;
        let (head_x, head_y) = FusionHeadWeights::bind(w)?;
        Ok(PipelineWeights {
            projection: ProjectionWeights::bind(w)?,
            gcnn: GcnnWeights::bind(w)?,
            fusion_xy,
            fusion_yx,
            consistency: ConsistencyWeights::bind(w)?,
            head_x,
            head_y,
        })
    }
}

fn gather_points(cloud: &PointCloud, idx: &[usize]) -> Vec<Point3> {
    idx.iter().map(|&i| *cloud.point(i)).collect()
}

/// Run the pipeline for one pair on `tape`.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    w: &PipelineWeights,
    cfg: &ModelConfig,
    ablation: &AblationConfig,
    x: &PreparedCloud,
    y: &PreparedCloud,
    mode: &WarpMode,
) -> Result<ForwardOutput> {
    x.cloud.ensure_pipeline_ready("source")?;
    y.cloud.ensure_pipeline_ready("target")?;
    let dx = descriptor_input(tape, &x.descriptor);
    let dy = descriptor_input(tape, &y.descriptor);
    let fx = project_features(tape, dx, &w.projection)?;
    let fy = project_features(tape, dy, &w.projection)?;
    let (hx, hy) = if ablation.gcnn {
        (embed(tape, fx, cfg.k_graph, &w.gcnn)?, embed(tape, fy, cfg.k_graph, &w.gcnn)?)
    } else {
        (fx, fy)
    };
    let s_hat = initial_scores(tape, hx, hy)?;

    if !ablation.uses_matchability() {
        let scores = dual_softmax(tape, s_hat)?;
        return Ok(ForwardOutput {
            s_hat,
            scores,
            tau_x: None,
            tau_y: None,
            matches: None,
            match_source: None,
            warp: None,
        });
    }

    let (matches, source, warp) = if ablation.reposition {
        let t = match mode {
            WarpMode::GroundTruth(t) => *t,
            WarpMode::Estimate => weighted_procrustes(&x.cloud, &y.cloud, &tape.value(s_hat).cast())?,
        };
        (warp_and_match(&x.cloud, &y.cloud, &t)?, MatchSource::WarpedNearestNeighbour, Some(t))
    } else {
        (argmax_match(tape.value(s_hat))?, MatchSource::ScoreArgmax, None)
    };

    let d = cfg.d;
    let (m, n) = (x.len(), y.len());
    let (hxy, hyx) = if ablation.bi_match {
        (
            fuse_pair_features(tape, hx, hy, &matches.src_to_tgt, &w.fusion_xy)?,
            fuse_pair_features(tape, hy, hx, &matches.tgt_to_src, &w.fusion_yx)?,
        )
    } else {
        (tape.constant(Tensor::zeros(&[m, d])), tape.constant(Tensor::zeros(&[n, d])))
    };
    let (vx, vy) = if ablation.global_consistency {
        let my = gather_points(&y.cloud, &matches.src_to_tgt);
        let mx = gather_points(&x.cloud, &matches.tgt_to_src);
        (
            confidence_features(tape, x.cloud.points(), &my, &w.consistency)?,
            confidence_features(tape, y.cloud.points(), &mx, &w.consistency)?,
        )
    } else {
        (tape.constant(Tensor::zeros(&[m, d])), tape.constant(Tensor::zeros(&[n, d])))
    };
    let tau_x = matchability_scores(tape, vx, hxy, &w.head_x)?;
    let tau_y = matchability_scores(tape, vy, hyx, &w.head_y)?;
    let s_m = matchability_matrix(tape, tau_x, tau_y)?;
    let scores = final_scores(tape, s_hat, s_m)?;
    Ok(ForwardOutput {
        s_hat,
        scores,
        tau_x: Some(tau_x),
        tau_y: Some(tau_y),
        matches: Some(matches),
        match_source: Some(source),
        warp,
    })
}

/// Inference result detached from any tape.
#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub s_hat: Tensor<f64>,
    pub scores: Tensor<f64>,
    pub tau_x: Option<Vec<f64>>,
    pub tau_y: Option<Vec<f64>>,
    pub match_source: Option<MatchSource>,
    pub warp: Option<RigidTransform>,
}

/// Trained weights plus switches, ready to score pairs.
#[derive(Debug, Clone)]
pub struct Matcher<T> {
    pub weights: ModelWeights<T>,
    pub ablation: AblationConfig,
}

impl<T: Real> Matcher<T> {
    pub fn new(weights: ModelWeights<T>, ablation: AblationConfig) -> Self {
        Matcher { weights, ablation }
    }

    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<PreparedCloud> {
        PreparedCloud::new(cloud.clone(), self.config().k_local)
    }

    pub fn match_prepared(&self, x: &PreparedCloud, y: &PreparedCloud, mode: &WarpMode) -> Result<MatchOutput> {
        let mut tape = Tape::new();
        let bound = self.weights.bind(&mut tape);
        let pw = PipelineWeights::bind(&bound)?;
        let out = forward(&mut tape, &pw, self.config(), &self.ablation, x, y, mode)?;
        let vec = |v: Option<Var>| v.map(|v| tape.value(v).to_f64_vec());
        Ok(MatchOutput {
            s_hat: tape.value(out.s_hat).cast(),
            scores: tape.value(out.scores).cast(),
            tau_x: vec(out.tau_x),
            tau_y: vec(out.tau_y),
            match_source: out.match_source,
            warp: out.warp,
        })
    }

    /// Score a pair of raw clouds with the inference-time repositioning.
    pub fn match_clouds(&self, x: &PointCloud, y: &PointCloud) -> Result<MatchOutput> {
        let (px, py) = (self.prepare(x)?, self.prepare(y)?);
        self.match_prepared(&px, &py, &WarpMode::Estimate)
    }
}
