//! Shared recognizer architecture: a four-stage residual convolutional
//! encoder with token-graph enhancement slots after stages 3 and 4, a 1D
//! convolutional temporal head emitting auxiliary logits, and a
//! bidirectional LSTM emitting sequence logits.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::{Array2, Array4, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nn::{he_normal, uniform_fan_in, zeros, ParamStore};
use crate::tme;

/// Stages carrying enhancement parameter slots. The slots always exist so
/// teacher and student expose identical parameter manifests; activation is
/// a runtime choice.
pub const ENHANCEMENT_STAGES: [usize; 2] = [3, 4];

/// Temporal downsampling factor of the head: two pool-by-2 blocks.
pub const TEMPORAL_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Gloss vocabulary size V; logits have V+1 classes with blank at V.
    pub vocab_size: usize,
    /// Channel width of stage 1; later stages double it.
    pub base_width: usize,
    /// Hidden width per LSTM direction.
    pub lstm_hidden: usize,
    /// Neighbors kept per token when the enhancement graph is built.
    pub tme_top_k: usize,
}

impl ArchConfig {
    pub fn with_defaults(vocab_size: usize) -> Self {
        ArchConfig {
            vocab_size,
            base_width: 16,
            lstm_hidden: 128,
            tme_top_k: 4,
        }
    }

    pub fn class_count(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn blank_index(&self) -> usize {
        self.vocab_size
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        let b = self.base_width;
        [b, 2 * b, 4 * b, 8 * b]
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 {
            return Err(Error::invalid("vocabulary must hold at least one gloss"));
        }
        if self.base_width < 1 || self.lstm_hidden < 1 || self.tme_top_k < 1 {
            return Err(Error::invalid(
                "base width, LSTM hidden size, and top-K must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Graph nodes produced by one full forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// Auxiliary logits from the convolutional temporal branch, [T', V+1].
    pub conv_logits: Tensor,
    /// Final sequence logits from the recurrent branch, [T', V+1].
    pub seq_logits: Tensor,
    /// Bidirectional recurrent features, [T', 2 * lstm_hidden].
    pub hidden: Tensor,
    pub temporal_len: usize,
    /// Parameter leaves in store order, for gradient gathering.
    pub bindings: Vec<Tensor>,
}

/// Nodes produced by the temporal head alone.
pub struct HeadNodes {
    pub conv_logits: Tensor,
    pub seq_logits: Tensor,
    pub hidden: Tensor,
    pub temporal_len: usize,
}

pub struct Recognizer {
    pub config: ArchConfig,
    pub params: ParamStore,
}

impl Recognizer {
    /// Builds a recognizer with fan-in-scaled random initialization drawn
    /// from a fixed seed. Residual gates start at zero, so enhancement is
    /// initially an exact identity.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let widths = config.stage_widths();

        let mut c_in = 3;
        for (l, &width) in widths.iter().enumerate() {
            let l = l + 1;
            params.add(
                &format!("stage{l}.conv1.weight"),
                he_normal(&mut rng, &[width, c_in, 3, 3], c_in * 9),
            );
            params.add(&format!("stage{l}.conv1.bias"), zeros(&[width]));
            params.add(
                &format!("stage{l}.conv2.weight"),
                he_normal(&mut rng, &[width, width, 3, 3], width * 9),
            );
            params.add(&format!("stage{l}.conv2.bias"), zeros(&[width]));
            params.add(
                &format!("stage{l}.skip.weight"),
                he_normal(&mut rng, &[width, c_in, 1, 1], c_in),
            );
            params.add(&format!("stage{l}.skip.bias"), zeros(&[width]));
            c_in = width;
        }

        for &l in &ENHANCEMENT_STAGES {
            let c = widths[l - 1];
            let d = c.min(64);
            params.add(
                &format!("tme{l}.query"),
                he_normal(&mut rng, &[c, d], c),
            );
            params.add(&format!("tme{l}.key"), he_normal(&mut rng, &[c, d], c));
            params.add(
                &format!("tme{l}.graph.weight"),
                he_normal(&mut rng, &[c, c], c),
            );
            params.add(&format!("tme{l}.gate"), zeros(&[1]));
        }

        let c4 = widths[3];
        for i in 1..=2 {
            params.add(
                &format!("temporal.conv{i}.weight"),
                he_normal(&mut rng, &[c4, 5, c4], 5 * c4),
            );
            params.add(&format!("temporal.conv{i}.bias"), zeros(&[c4]));
        }

        let h = config.lstm_hidden;
        for dir in ["fwd", "bwd"] {
            params.add(
                &format!("lstm.{dir}.input.weight"),
                uniform_fan_in(&mut rng, &[c4, 4 * h], h),
            );
            params.add(
                &format!("lstm.{dir}.hidden.weight"),
                uniform_fan_in(&mut rng, &[h, 4 * h], h),
            );
            params.add(
                &format!("lstm.{dir}.bias"),
                uniform_fan_in(&mut rng, &[4 * h], h),
            );
        }

        let classes = config.class_count();
        params.add(
            "classifier.conv.weight",
            uniform_fan_in(&mut rng, &[c4, classes], c4),
        );
        params.add("classifier.conv.bias", zeros(&[classes]));
        params.add(
            "classifier.seq.weight",
            uniform_fan_in(&mut rng, &[2 * h, classes], 2 * h),
        );
        params.add("classifier.seq.bias", zeros(&[classes]));

        Ok(Recognizer { config, params })
    }

    pub fn manifest(&self) -> String {
        self.params.manifest()
    }

    fn bound(&self, bindings: &[Tensor], name: &str) -> Tensor {
        bindings[self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    /// Runs the residual stages over [T, 3, H, W] frames, applying the
    /// token-graph enhancement after any activated stage, and returns the
    /// four stage outputs plus spatially pooled per-frame features [T, C4].
    pub fn encode_visual(
        &self,
        g: &mut Graph,
        bindings: &[Tensor],
        frames: &Array4<f64>,
        tme_stages: &BTreeSet<usize>,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let (t, ch, h, w) = frames.dim();
        if ch != 3 {
            return Err(Error::invalid(format!(
                "frames must have 3 channels, got {ch}"
            )));
        }
        if t == 0 {
            return Err(Error::invalid("frame sequence is empty"));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::invalid(format!(
                "spatial size {h}x{w} must be a positive multiple of 16"
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frames contain non-finite values"));
        }
        for &l in tme_stages {
            if !ENHANCEMENT_STAGES.contains(&l) {
                return Err(Error::invalid(format!(
                    "enhancement slots exist after stages 3 and 4 only, got {l}"
                )));
            }
        }

        let mut x = g.constant(frames.clone().into_dyn());
        let mut stages = Vec::with_capacity(4);
        for l in 1..=4 {
            let w1 = self.bound(bindings, &format!("stage{l}.conv1.weight"));
            let b1 = self.bound(bindings, &format!("stage{l}.conv1.bias"));
            let w2 = self.bound(bindings, &format!("stage{l}.conv2.weight"));
            let b2 = self.bound(bindings, &format!("stage{l}.conv2.bias"));
            let ws = self.bound(bindings, &format!("stage{l}.skip.weight"));
            let bs = self.bound(bindings, &format!("stage{l}.skip.bias"));

            let c1 = g.conv2d(x, w1, b1, 2, 1);
            let r1 = g.relu(c1);
            let c2 = g.conv2d(r1, w2, b2, 1, 1);
            let skip = g.conv2d(x, ws, bs, 2, 0);
            let sum = g.add(c2, skip);
            x = g.relu(sum);
            if ENHANCEMENT_STAGES.contains(&l) && tme_stages.contains(&l) {
                x = self.enhance(g, bindings, x, l)?;
            }
            stages.push(x);
        }
        let pooled = g.mean_spatial(x);
        Ok((stages, pooled))
    }

    /// Token-graph enhancement of one stage output. The adjacency is built
    /// from the current projection values and enters the graph as a
    /// constant; only the mixing weights and the gate lie on the
    /// differentiable path.
    fn enhance(&self, g: &mut Graph, bindings: &[Tensor], x: Tensor, l: usize) -> Result<Tensor> {
        let feat = g
            .value(x)
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let (t, c, h, w) = feat.dim();
        let tokens = tme::tokenize(&feat.view());

        let wq = self.params.value(self.params.index_of(&format!("tme{l}.query")).unwrap());
        let wk = self.params.value(self.params.index_of(&format!("tme{l}.key")).unwrap());
        let wq2 = wq.view().into_dimensionality::<Ix2>().unwrap();
        let wk2 = wk.view().into_dimensionality::<Ix2>().unwrap();
        let s = tme::correlate(&tokens.view(), &wq2, &wk2);
        let graph = tme::build_graph(&s, t, h * w, self.config.tme_top_k)?;
        let adj = Arc::new(tme::normalized_adjacency(&graph));

        let tok = g.tokens_from_feat(x);
        let mixed = g.sparse_matmul(adj, tok);
        let wg = self.bound(bindings, &format!("tme{l}.graph.weight"));
        let lin = g.matmul(mixed, wg);
        let act = g.relu(lin);
        let back = g.feat_from_tokens(act, [t, c, h, w]);
        let gate = self.bound(bindings, &format!("tme{l}.gate"));
        let scaled = g.scale_by(back, gate);
        Ok(g.add(x, scaled))
    }

    /// Temporal head over pooled features [T, C4]: two conv+pool blocks
    /// reduce T to T' = floor(T / 4), a linear classifier yields the
    /// auxiliary logits, and a bidirectional LSTM with its own classifier
    /// yields the sequence logits.
    pub fn temporal_head(
        &self,
        g: &mut Graph,
        bindings: &[Tensor],
        pooled: Tensor,
    ) -> Result<HeadNodes> {
        let t = g.value(pooled).shape()[0];
        if t < TEMPORAL_FACTOR {
            return Err(Error::invalid(format!(
                "temporal collapse: {t} frames is below the receptive field of {TEMPORAL_FACTOR}"
            )));
        }

        let mut x = pooled;
        for i in 1..=2 {
            let w = self.bound(bindings, &format!("temporal.conv{i}.weight"));
            let b = self.bound(bindings, &format!("temporal.conv{i}.bias"));
            let c = g.conv1d(x, w, b);
            let r = g.relu(c);
            x = g.max_pool1d(r);
        }

        let cw = self.bound(bindings, "classifier.conv.weight");
        let cb = self.bound(bindings, "classifier.conv.bias");
        let cl = g.matmul(x, cw);
        let conv_logits = g.add_bias(cl, cb);

        let hidden = self.bilstm(g, bindings, x);
        let sw = self.bound(bindings, "classifier.seq.weight");
        let sb = self.bound(bindings, "classifier.seq.bias");
        let sl = g.matmul(hidden, sw);
        let seq_logits = g.add_bias(sl, sb);

        Ok(HeadNodes {
            conv_logits,
            seq_logits,
            hidden,
            temporal_len: t / TEMPORAL_FACTOR,
        })
    }

    fn lstm_direction(
        &self,
        g: &mut Graph,
        bindings: &[Tensor],
        x: Tensor,
        prefix: &str,
    ) -> Tensor {
        let hsize = self.config.lstm_hidden;
        let t = g.value(x).shape()[0];
        let w_ih = self.bound(bindings, &format!("{prefix}.input.weight"));
        let w_hh = self.bound(bindings, &format!("{prefix}.hidden.weight"));
        let bias = self.bound(bindings, &format!("{prefix}.bias"));

        let xw = g.matmul(x, w_ih);
        let xwb = g.add_bias(xw, bias);
        let mut h = g.constant(Array2::<f64>::zeros((1, hsize)).into_dyn());
        let mut c = g.constant(Array2::<f64>::zeros((1, hsize)).into_dyn());
        let mut outputs = Vec::with_capacity(t);
        for ti in 0..t {
            let xt = g.slice_rows(xwb, ti, 1);
            let hw = g.matmul(h, w_hh);
            let gates = g.add(xt, hw);
            let gi = g.slice_cols(gates, 0, hsize);
            let input_gate = g.sigmoid(gi);
            let gf = g.slice_cols(gates, hsize, hsize);
            let forget_gate = g.sigmoid(gf);
            let gc = g.slice_cols(gates, 2 * hsize, hsize);
            let candidate = g.tanh(gc);
            let go = g.slice_cols(gates, 3 * hsize, hsize);
            let output_gate = g.sigmoid(go);
            let kept = g.mul(forget_gate, c);
            let written = g.mul(input_gate, candidate);
            c = g.add(kept, written);
            let ct = g.tanh(c);
            h = g.mul(output_gate, ct);
            outputs.push(h);
        }
        g.concat_rows(&outputs)
    }

    fn bilstm(&self, g: &mut Graph, bindings: &[Tensor], x: Tensor) -> Tensor {
        let fwd = self.lstm_direction(g, bindings, x, "lstm.fwd");
        let xr = g.reverse_rows(x);
        let bwd_rev = self.lstm_direction(g, bindings, xr, "lstm.bwd");
        let bwd = g.reverse_rows(bwd_rev);
        g.concat_cols(&[fwd, bwd])
    }

    /// Full forward pass: binds parameters, encodes frames, and runs the
    /// temporal head. `tme_stages` selects which enhancement slots are
    /// active; an empty set gives the plain backbone.
    pub fn forward(
        &self,
        g: &mut Graph,
        frames: &Array4<f64>,
        tme_stages: &BTreeSet<usize>,
    ) -> Result<ForwardPass> {
        let bindings = self.params.bind(g);
        let (_, pooled) = self.encode_visual(g, &bindings, frames, tme_stages)?;
        let head = self.temporal_head(g, &bindings, pooled)?;
        Ok(ForwardPass {
            conv_logits: head.conv_logits,
            seq_logits: head.seq_logits,
            hidden: head.hidden,
            temporal_len: head.temporal_len,
            bindings,
        })
    }
}
