//! Teacher-forced forward pass on the autodiff graph.

use std::collections::HashMap;

use super::Dslm;
use crate::assemble::TrainingExample;
use crate::error::{CoreError, CoreResult};
use crate::graph::{Graph, TensorId};
use crate::mask::{build_bca_masks, build_sa_mask, MaskConfig, SaMaskKind};
use crate::params::{AttnIds, DecBlockIds, EncBlockIds, GroupId};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// One stream's raw inputs to the teacher-forced forward.
#[derive(Debug, Clone)]
pub struct StreamInputs<'a> {
    pub input: &'a [u32],
    /// Columns that are valid attention keys (the unpadded prefix).
    pub real_len: usize,
}

/// Inputs to a full forward pass, independent of loss bookkeeping.
#[derive(Debug, Clone)]
pub struct ForwardSpec<'a> {
    pub lyric_ids: &'a [u32],
    pub vocal: Option<StreamInputs<'a>>,
    pub accomp: Option<StreamInputs<'a>>,
    pub mask_config: MaskConfig,
    /// Run the song decoder (requires both streams).
    pub song_head: bool,
}

/// Graph handles produced by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits_v: Option<TensorId>,
    pub logits_a: Option<TensorId>,
    pub logits_s: Option<TensorId>,
    /// Final-layer (post final norm) decoder states fed to the song decoder.
    pub e_v: Option<TensorId>,
    pub e_a: Option<TensorId>,
}

/// Lazily inserts parameter groups as graph leaves, once each.
pub struct ParamLeaves<'s, S: Scalar> {
    store: &'s ParamStore<S>,
    trainable: bool,
    leaves: HashMap<GroupId, TensorId>,
}

impl<'s, S: Scalar> ParamLeaves<'s, S> {
    pub fn new(store: &'s ParamStore<S>, trainable: bool) -> Self {
        ParamLeaves {
            store,
            trainable,
            leaves: HashMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph<S>, id: GroupId) -> TensorId {
        if let Some(&t) = self.leaves.get(&id) {
            return t;
        }
        let desc = self.store.layout.group(id);
        let t = g.leaf_from(desc.shape.clone(), self.store.slice(id).to_vec(), self.trainable);
        self.leaves.insert(id, t);
        t
    }

    /// Accumulate leaf gradients into a flat buffer with the store's layout.
    pub fn add_grads_into(&self, g: &Graph<S>, out: &mut [S]) {
        for (&gid, &tid) in &self.leaves {
            if let Some(grad) = g.grad_ref(tid) {
                let desc = self.store.layout.group(gid);
                let dst = &mut out[desc.offset..desc.offset + desc.len];
                for (o, &v) in dst.iter_mut().zip(grad) {
                    *o += v;
                }
            }
        }
    }
}

/// Additive mask leaf combining a structural mask with key-padding: key j is
/// attendable iff the structural mask allows it and j < key_real_len.
fn mask_leaf<S: Scalar>(
    g: &mut Graph<S>,
    structural: &crate::mask::MaskMatrix,
    key_real_len: usize,
) -> TensorId {
    let (tq, tk) = (structural.query_len(), structural.key_len());
    let mut data = Vec::with_capacity(tq * tk);
    for i in 0..tq {
        for j in 0..tk {
            let ok = structural.allowed(i, j) && j < key_real_len;
            data.push(if ok { S::zero() } else { S::neg_infinity() });
        }
    }
    g.leaf_from(vec![tq, tk], data, false)
}

fn full_mask_leaf<S: Scalar>(g: &mut Graph<S>, tq: usize, tk: usize) -> TensorId {
    g.leaf_from(vec![tq, tk], vec![S::zero(); tq * tk], false)
}

/// Pre-norm residual attention sublayer. `kv_src` is already normalized (or
/// is an encoder output, which ends with a final norm).
fn attn_sublayer<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &mut ParamLeaves<S>,
    residual: TensorId,
    ids: &AttnIds,
    kv_src_raw: TensorId,
    kv_prenormed: bool,
    mask: TensorId,
    heads: usize,
) -> CoreResult<TensorId> {
    let gain = leaves.get(g, ids.norm_gain);
    let bias = leaves.get(g, ids.norm_bias);
    let q_in = g.layer_norm(residual, gain, bias)?;
    let kv_in = if kv_prenormed {
        kv_src_raw
    } else {
        let (kg, kb) = ids.kv_norm.expect("raw kv source needs a kv norm");
        let kg = leaves.get(g, kg);
        let kb = leaves.get(g, kb);
        g.layer_norm(kv_src_raw, kg, kb)?
    };
    let wq = leaves.get(g, ids.wq);
    let wk = leaves.get(g, ids.wk);
    let wv = leaves.get(g, ids.wv);
    let wo = leaves.get(g, ids.wo);
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let scores = g.matmul_nt(qh, kh)?;
    let dk = g.shape(qh)[2];
    let scaled = g.scale(scores, S::from_f64(1.0 / (dk as f64).sqrt()));
    let probs = g.softmax_masked(scaled, mask)?;
    let ctx = g.matmul(probs, vh)?;
    let merged = g.merge_heads(ctx)?;
    let out = g.matmul(merged, wo)?;
    g.add(residual, out)
}

fn ffn_sublayer<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &mut ParamLeaves<S>,
    residual: TensorId,
    ids: &crate::params::FfnIds,
) -> CoreResult<TensorId> {
    let gain = leaves.get(g, ids.norm_gain);
    let bias = leaves.get(g, ids.norm_bias);
    let x = g.layer_norm(residual, gain, bias)?;
    let w1 = leaves.get(g, ids.w1);
    let w2 = leaves.get(g, ids.w2);
    let h = g.matmul(x, w1)?;
    let h = g.gelu(h);
    let out = g.matmul(h, w2)?;
    g.add(residual, out)
}

fn embed_tokens<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &mut ParamLeaves<S>,
    tok_emb: GroupId,
    pos_emb: GroupId,
    ids: &[u32],
) -> CoreResult<TensorId> {
    let tok_table = leaves.get(g, tok_emb);
    let pos_table = leaves.get(g, pos_emb);
    let toks = g.embedding(tok_table, ids)?;
    let positions: Vec<u32> = (0..ids.len() as u32).collect();
    let poss = g.embedding(pos_table, &positions)?;
    g.add(toks, poss)
}

/// Full-attention encoder over the lyric tokens. A dropped or absent lyric
/// condition is the single null-lyric token.
pub fn encode_lyrics<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &mut ParamLeaves<S>,
    model: &Dslm,
    lyric_ids: &[u32],
) -> CoreResult<TensorId> {
    if lyric_ids.is_empty() {
        return Err(CoreError::BadCondition {
            task: "encode_lyrics",
            detail: "empty lyric ids; use the null-lyric token".into(),
        });
    }
    if lyric_ids.len() > model.cfg.ctx_lyrics {
        return Err(CoreError::Overlength {
            len: lyric_ids.len(),
            max: model.cfg.ctx_lyrics,
        });
    }
    let enc = &model.ids.encoder;
    let tower = &enc.tower;
    let mut h = embed_tokens(
        g,
        leaves,
        tower.tok_emb.unwrap(),
        tower.pos_emb.unwrap(),
        lyric_ids,
    )?;
    let t = lyric_ids.len();
    let mask = full_mask_leaf(g, t, t);
    for EncBlockIds { sa, ffn } in &enc.blocks {
        h = attn_sublayer(g, leaves, h, sa, h, false, mask, model.cfg.heads)?;
        h = ffn_sublayer(g, leaves, h, ffn)?;
    }
    let gain = leaves.get(g, tower.final_gain);
    let bias = leaves.get(g, tower.final_bias);
    g.layer_norm(h, gain, bias)
}

// In the SA sublayer the query source and the kv source are the same
// normalized tensor; attn_sublayer re-normalizes the residual for q, so for
// SA we pass the residual as a raw kv source with the same norm weights.
// A dedicated path keeps q and kv identical without a second norm.
fn sa_sublayer<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &mut ParamLeaves<S>,
    residual: TensorId,
    ids: &AttnIds,
    mask: TensorId,
    heads: usize,
) -> CoreResult<TensorId> {
    let gain = leaves.get(g, ids.norm_gain);
    let bias = leaves.get(g, ids.norm_bias);
    let x = g.layer_norm(residual, gain, bias)?;
    let wq = leaves.get(g, ids.wq);
    let wk = leaves.get(g, ids.wk);
    let wv = leaves.get(g, ids.wv);
    let wo = leaves.get(g, ids.wo);
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let qh = g.split_heads(q, heads)?;
    let kh = g.split_heads(k, heads)?;
    let vh = g.split_heads(v, heads)?;
    let scores = g.matmul_nt(qh, kh)?;
    let dk = g.shape(qh)[2];
    let scaled = g.scale(scores, S::from_f64(1.0 / (dk as f64).sqrt()));
    let probs = g.softmax_masked(scaled, mask)?;
    let ctx = g.matmul(probs, vh)?;
    let merged = g.merge_heads(ctx)?;
    let out = g.matmul(merged, wo)?;
    g.add(residual, out)
}

struct StreamCtx {
    sa_mask: TensorId,
    ca_mask: TensorId,
    bca_mask: Option<TensorId>,
}

/// Teacher-forced forward over raw stream inputs.
pub fn forward_spec<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &mut ParamLeaves<S>,
    model: &Dslm,
    spec: &ForwardSpec<'_>,
) -> CoreResult<ForwardOutput> {
    let cfg = &model.cfg;
    let mc = &spec.mask_config;
    if mc.vocal_enabled != spec.vocal.is_some() || mc.accomp_enabled != spec.accomp.is_some() {
        return Err(CoreError::BadCondition {
            task: "forward",
            detail: "enabled streams do not match provided inputs".into(),
        });
    }
    let t_v = spec.vocal.as_ref().map(|s| s.input.len()).unwrap_or(0);
    let t_a = spec.accomp.as_ref().map(|s| s.input.len()).unwrap_or(0);
    if mc.vocal_enabled && mc.accomp_enabled && t_v != t_a {
        return Err(CoreError::ShapeMismatch {
            op: "forward",
            lhs: vec![t_v],
            rhs: vec![t_a],
        });
    }
    let t = t_v.max(t_a);
    if t > cfg.ctx_dec {
        return Err(CoreError::Overlength {
            len: t,
            max: cfg.ctx_dec,
        });
    }

    let h_lyr = encode_lyrics(g, leaves, model, spec.lyric_ids)?;
    let t_l = spec.lyric_ids.len();

    let bca = build_bca_masks(mc.bca, t.max(1));
    let mut stream_ctx = |sa_kind: SaMaskKind,
                          g: &mut Graph<S>,
                          own_real: usize,
                          other_real: usize,
                          cross: (&crate::mask::MaskMatrix, bool)|
     -> CoreResult<StreamCtx> {
        let sa = build_sa_mask(sa_kind, t)?;
        Ok(StreamCtx {
            sa_mask: mask_leaf(g, &sa, own_real),
            ca_mask: full_mask_leaf(g, t, t_l),
            bca_mask: if cross.1 {
                None
            } else {
                Some(mask_leaf(g, cross.0, other_real))
            },
        })
    };

    let real_v = spec.vocal.as_ref().map(|s| s.real_len).unwrap_or(0);
    let real_a = spec.accomp.as_ref().map(|s| s.real_len).unwrap_or(0);

    let vocal_ctx = if mc.vocal_enabled {
        Some(stream_ctx(
            mc.vocal_sa,
            g,
            real_v,
            real_a,
            (&bca.vocal_from_accomp, bca.vocal_bypass || !mc.accomp_enabled),
        )?)
    } else {
        None
    };
    let accomp_ctx = if mc.accomp_enabled {
        Some(stream_ctx(
            mc.accomp_sa,
            g,
            real_a,
            real_v,
            (&bca.accomp_from_vocal, bca.accomp_bypass || !mc.vocal_enabled),
        )?)
    } else {
        None
    };

    let mut h_v = match &spec.vocal {
        Some(s) => Some(embed_tokens(
            g,
            leaves,
            model.ids.vocal.tower.tok_emb.unwrap(),
            model.ids.vocal.tower.pos_emb.unwrap(),
            s.input,
        )?),
        None => None,
    };
    let mut h_a = match &spec.accomp {
        Some(s) => Some(embed_tokens(
            g,
            leaves,
            model.ids.accomp.tower.tok_emb.unwrap(),
            model.ids.accomp.tower.pos_emb.unwrap(),
            s.input,
        )?),
        None => None,
    };

    for l in 0..cfg.dec_layers {
        // BCA consumes the previous layer's other-stream states: both streams
        // read the block inputs captured here, so there is no intra-layer
        // circularity.
        let prev_v = h_v;
        let prev_a = h_a;
        if let (Some(hv), Some(ctx)) = (prev_v, &vocal_ctx) {
            let blk: &DecBlockIds = &model.ids.vocal.blocks[l];
            let mut h = sa_sublayer(g, leaves, hv, &blk.sa, ctx.sa_mask, cfg.heads)?;
            h = attn_sublayer(g, leaves, h, &blk.ca, h_lyr, true, ctx.ca_mask, cfg.heads)?;
            if let (Some(bm), Some(pa)) = (ctx.bca_mask, prev_a) {
                h = attn_sublayer(g, leaves, h, &blk.bca, pa, false, bm, cfg.heads)?;
            }
            h = ffn_sublayer(g, leaves, h, &blk.ffn)?;
            h_v = Some(h);
        }
        if let (Some(ha), Some(ctx)) = (prev_a, &accomp_ctx) {
            let blk: &DecBlockIds = &model.ids.accomp.blocks[l];
            let mut h = sa_sublayer(g, leaves, ha, &blk.sa, ctx.sa_mask, cfg.heads)?;
            h = attn_sublayer(g, leaves, h, &blk.ca, h_lyr, true, ctx.ca_mask, cfg.heads)?;
            if let (Some(bm), Some(pv)) = (ctx.bca_mask, prev_v) {
                h = attn_sublayer(g, leaves, h, &blk.bca, pv, false, bm, cfg.heads)?;
            }
            h = ffn_sublayer(g, leaves, h, &blk.ffn)?;
            h_a = Some(h);
        }
    }

    let finalize = |g: &mut Graph<S>,
                    leaves: &mut ParamLeaves<S>,
                    h: TensorId,
                    tower: &crate::params::TowerIds|
     -> CoreResult<(TensorId, TensorId)> {
        let gain = leaves.get(g, tower.final_gain);
        let bias = leaves.get(g, tower.final_bias);
        let e = g.layer_norm(h, gain, bias)?;
        let head = leaves.get(g, tower.head.unwrap());
        let logits = g.matmul(e, head)?;
        Ok((e, logits))
    };

    let (e_v, logits_v) = match h_v {
        Some(h) => {
            let (e, l) = finalize(g, leaves, h, &model.ids.vocal.tower)?;
            (Some(e), Some(l))
        }
        None => (None, None),
    };
    let (e_a, logits_a) = match h_a {
        Some(h) => {
            let (e, l) = finalize(g, leaves, h, &model.ids.accomp.tower)?;
            (Some(e), Some(l))
        }
        None => (None, None),
    };

    let logits_s = if spec.song_head && mc.song_head_enabled {
        let (Some(ev), Some(ea)) = (e_v, e_a) else {
            return Err(CoreError::BadCondition {
                task: "forward",
                detail: "song head requires both decoder streams".into(),
            });
        };
        Some(song_decoder_forward(
            g,
            leaves,
            model,
            ev,
            ea,
            real_v.min(real_a),
        )?)
    } else {
        None
    };

    Ok(ForwardOutput {
        logits_v,
        logits_a,
        logits_s,
        e_v,
        e_a,
    })
}

/// Non-autoregressive song decoder: featurewise concat of the two decoders'
/// final states, input projection, full-attention blocks, positionwise head.
pub fn song_decoder_forward<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &mut ParamLeaves<S>,
    model: &Dslm,
    e_v: TensorId,
    e_a: TensorId,
    key_real_len: usize,
) -> CoreResult<TensorId> {
    if g.shape(e_v) != g.shape(e_a) {
        return Err(CoreError::ShapeMismatch {
            op: "song_decoder",
            lhs: g.shape(e_v).to_vec(),
            rhs: g.shape(e_a).to_vec(),
        });
    }
    let t = g.shape(e_v)[0];
    let cat = g.concat_last(e_v, e_a)?;
    let in_proj = leaves.get(g, model.ids.song.in_proj);
    let mut h = g.matmul(cat, in_proj)?;
    let sa_struct = build_sa_mask(SaMaskKind::NonCausal, t.max(1))?;
    let mask = mask_leaf(g, &sa_struct, key_real_len.max(1));
    for EncBlockIds { sa, ffn } in &model.ids.song.blocks {
        h = sa_sublayer(g, leaves, h, sa, mask, model.cfg.heads)?;
        h = ffn_sublayer(g, leaves, h, ffn)?;
    }
    let tower = &model.ids.song.tower;
    let gain = leaves.get(g, tower.final_gain);
    let bias = leaves.get(g, tower.final_bias);
    let e = g.layer_norm(h, gain, bias)?;
    let head = leaves.get(g, tower.head.unwrap());
    g.matmul(e, head)
}

/// Teacher-forced forward of an assembled training example.
pub fn decoders_forward<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &mut ParamLeaves<S>,
    model: &Dslm,
    ex: &TrainingExample,
) -> CoreResult<ForwardOutput> {
    let mc = &ex.mask_config;
    if (mc.vocal_enabled && ex.vocal.real_len == 0)
        || (mc.accomp_enabled && ex.accomp.real_len == 0)
    {
        return Err(CoreError::BadCondition {
            task: "decoders_forward",
            detail: "enabled stream has no real columns; example/task mask mismatch".into(),
        });
    }
    let spec = ForwardSpec {
        lyric_ids: &ex.lyric_ids,
        vocal: mc.vocal_enabled.then_some(StreamInputs {
            input: &ex.vocal.input,
            real_len: ex.vocal.real_len,
        }),
        accomp: mc.accomp_enabled.then_some(StreamInputs {
            input: &ex.accomp.input,
            real_len: ex.accomp.real_len,
        }),
        mask_config: *mc,
        song_head: mc.song_head_enabled,
    };
    forward_spec(g, leaves, model, &spec)
}
