//! Assembly of a frozen encoder, a frozen decoder and the adaptation pathway.

use crate::adapt::adapter::{Adapter, LayerAdapters};
use crate::adapt::connection::{Connection, ConnectionKind};
use crate::adapt::prompt::{DeepPrompt, SoftPrompt};
use crate::adapt::schedule::{build_schedule, InjectionSchedule};
use crate::adapt::variant::{FrameMode, ScheduleRule, VariantSpec};
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{ClsTrace, Decoder, DecoderConfig, DecoderHooks, DecoderOutput, Encoder, EncoderConfig, Layout};
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

/// Parameter structure of an assembled variant. Holds ids, not values.
#[derive(Clone, Debug)]
pub struct EpalmArch {
    pub variant: VariantSpec,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// `None` when the variant ignores perception.
    pub schedule: Option<InjectionSchedule>,
    pub connection: Option<Connection>,
    pub prompt: Option<SoftPrompt>,
    pub deep_prompt: Option<DeepPrompt>,
    /// One entry per decoder layer.
    pub adapters: Vec<Option<LayerAdapters>>,
}

impl EpalmArch {
    /// Backbones are declared first so their parameter ids (and therefore
    /// their initial values) do not depend on the variant.
    pub fn declare(enc: &EncoderConfig, dec: &DecoderConfig, variant: &VariantSpec) -> Result<(Self, Layout)> {
        variant.validate()?;
        let mut layout = Layout::new();
        let encoder = Encoder::declare(&mut layout, enc)?;
        let decoder = Decoder::declare(&mut layout, dec)?;
        let schedule = match variant.connection {
            None => None,
            Some(_) => Some(match &variant.schedule {
                ScheduleRule::Standard { k, stride } => build_schedule(enc.n_layers, dec.n_layers, *k, *stride)?,
                ScheduleRule::InputOnly => InjectionSchedule::input_only(enc.n_layers)?,
                ScheduleRule::Pairs { pairs } => InjectionSchedule::from_pairs(pairs.clone(), enc.n_layers, dec.n_layers)?,
            }),
        };
        let connection = match (variant.connection, &schedule) {
            (Some(kind), Some(s)) => Some(Connection::declare(&mut layout, kind, s.len(), enc.d_model, dec.d_model)),
            _ => None,
        };
        let prompt = variant.prompt.map(|spec| SoftPrompt::declare(&mut layout, spec, dec.d_model));
        let deep_prompt = variant
            .deep_prompt
            .map(|len| DeepPrompt::declare(&mut layout, len, dec.n_layers, dec.d_model));
        let mut adapters = Vec::with_capacity(dec.n_layers);
        for j in 0..dec.n_layers {
            adapters.push(match &variant.adapters {
                Some(spec) if spec.covers(j) => Some(LayerAdapters {
                    attn: Adapter::declare(&mut layout, &format!("adapters.{j}.attn"), dec.d_model, spec.downsample_factor)?,
                    ffn: Adapter::declare(&mut layout, &format!("adapters.{j}.ffn"), dec.d_model, spec.downsample_factor)?,
                }),
                _ => None,
            });
        }
        layout.set_trainable_by_prefix(&variant.trainable_prefixes());
        if !variant.all_tokens {
            // The [CLS] trace is read before the final norm, which then never sees a gradient.
            layout.set_trainable(encoder.ln_f.gain, false);
            layout.set_trainable(encoder.ln_f.bias, false);
        }
        Ok((
            EpalmArch {
                variant: variant.clone(),
                encoder,
                decoder,
                schedule,
                connection,
                prompt,
                deep_prompt,
                adapters,
            },
            layout,
        ))
    }

    pub fn prompt_len(&self) -> usize {
        match (&self.prompt, &self.deep_prompt) {
            (Some(p), _) => p.spec.length,
            (_, Some(d)) => d.length,
            _ => 0,
        }
    }

    /// Whether gradients must flow into the encoder; otherwise its outputs can
    /// be computed once and cached.
    pub fn encoder_trainable(&self, store: &ParamStore<impl Float>) -> bool {
        store.iter().any(|(_, p)| p.trainable() && p.name.starts_with("encoder."))
    }
}

/// Encoder outputs needed by the adaptation pathway, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPerception<T> {
    pub cls: ClsTrace<T>,
    /// Final normalized tokens `[n_patches + 1, d]`, kept only for all-token prepending.
    pub tokens: Option<Tensor<T>>,
}

/// What the model sees besides text.
#[derive(Clone, Copy, Debug)]
pub enum Perception<'a, T> {
    Patches(&'a Tensor<T>),
    Frames(&'a [Tensor<T>]),
    /// Precomputed by [`EpalmModel::encode`]; only valid while the encoder is frozen.
    Encoded(&'a EncodedPerception<T>),
    Absent,
}

/// Arithmetic mean of per-layer [CLS] states over frames.
pub fn average_frame_cls<T: Float>(traces: &[ClsTrace<T>]) -> Result<ClsTrace<T>> {
    let first = traces.first().ok_or(Error::Empty("frame traces"))?;
    let (nl, d) = (first.n_layers(), first.dim());
    if let Some(bad) = traces.iter().find(|t| t.n_layers() != nl || t.dim() != d) {
        return Err(Error::shape("average_frame_cls", &[bad.n_layers(), bad.dim()], &[nl, d]));
    }
    let inv = T::one() / T::from_usize(traces.len()).expect("frame count fits the float type");
    let per_layer_cls = (0..nl)
        .map(|l| {
            (0..d)
                .map(|i| traces.iter().fold(T::zero(), |acc, t| acc + t.per_layer_cls[l][i]) * inv)
                .collect()
        })
        .collect();
    Ok(ClsTrace { per_layer_cls })
}

#[derive(Clone, Debug)]
pub struct MultimodalOutput {
    pub decoder: DecoderOutput,
    /// `(decoder_layer, projected slot)` in schedule order.
    pub injected: Vec<(usize, NodeId)>,
}

/// An assembled variant together with its parameter values.
#[derive(Clone, Debug)]
pub struct EpalmModel<T: Float> {
    pub arch: EpalmArch,
    pub params: ParamStore<T>,
}

struct Hooks<'m> {
    arch: &'m EpalmArch,
    cls: Vec<NodeId>,
    tokens: Option<NodeId>,
    injected: std::cell::RefCell<Vec<(usize, NodeId)>>,
}

impl<T: Float> DecoderHooks<T> for Hooks<'_> {
    fn inject(&self, g: &mut Graph<'_, T>, layer: usize) -> Result<Option<NodeId>> {
        let (Some(schedule), Some(conn)) = (&self.arch.schedule, &self.arch.connection) else {
            return Ok(None);
        };
        let Some(k) = schedule.level_at(layer) else {
            return Ok(None);
        };
        let slot = match self.tokens {
            Some(tok) => conn.projection(k)?.forward(g, tok)?,
            None => conn.project_cls(g, &self.cls, schedule, k)?,
        };
        self.injected.borrow_mut().push((layer, slot));
        Ok(Some(slot))
    }

    fn layer_prompt(&self, g: &mut Graph<'_, T>, layer: usize) -> Result<Option<NodeId>> {
        match &self.arch.deep_prompt {
            Some(dp) if layer > 0 => Ok(dp.layer(g, layer)),
            _ => Ok(None),
        }
    }

    fn has_adapters(&self, layer: usize) -> bool {
        matches!(self.arch.adapters.get(layer), Some(Some(_)))
    }

    fn after_attention(&self, g: &mut Graph<'_, T>, layer: usize, h: NodeId) -> Result<NodeId> {
        match self.arch.adapters.get(layer) {
            Some(Some(a)) => a.attn.forward(g, h),
            _ => Ok(h),
        }
    }

    fn after_ffn(&self, g: &mut Graph<'_, T>, layer: usize, h: NodeId) -> Result<NodeId> {
        match self.arch.adapters.get(layer) {
            Some(Some(a)) => a.ffn.forward(g, h),
            _ => Ok(h),
        }
    }
}

impl<T: Float> EpalmModel<T> {
    pub fn new(enc: &EncoderConfig, dec: &DecoderConfig, variant: &VariantSpec, rng: &RngState) -> Result<Self> {
        let (arch, layout) = EpalmArch::declare(enc, dec, variant)?;
        let params = layout.materialize(rng)?;
        Ok(EpalmModel { arch, params })
    }

    /// Runs the encoder once and keeps what the adaptation pathway reads.
    pub fn encode(&self, perception: Perception<'_, T>) -> Result<EncodedPerception<T>> {
        let mut g = Graph::new(&self.params);
        let (cls, tokens) = self.encode_nodes(&mut g, perception)?;
        let dim = self.arch.encoder.cfg.d_model;
        Ok(EncodedPerception {
            cls: ClsTrace {
                per_layer_cls: cls.iter().map(|&id| g.value(id).to_vec()).collect(),
            },
            tokens: match tokens {
                Some(id) => Some(Tensor::new(vec![g.shape(id).0, dim], g.value(id).to_vec())?),
                None => None,
            },
        })
    }

    fn encode_nodes(&self, g: &mut Graph<'_, T>, perception: Perception<'_, T>) -> Result<(Vec<NodeId>, Option<NodeId>)> {
        let all_tokens = self.arch.variant.all_tokens;
        match perception {
            Perception::Absent => Err(Error::Config(format!(
                "variant {} needs perception input",
                self.arch.variant.name
            ))),
            Perception::Encoded(e) => {
                let d = e.cls.dim();
                let cls = e
                    .cls
                    .per_layer_cls
                    .iter()
                    .map(|v| g.input(1, d, v.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let tokens = match (&e.tokens, all_tokens) {
                    (Some(t), true) => {
                        let (r, c) = t.as_matrix_dims();
                        Some(g.input(r, c, t.data().to_vec())?)
                    }
                    (None, true) => return Err(Error::Config("cached perception lacks encoder tokens".into())),
                    _ => None,
                };
                Ok((cls, tokens))
            }
            Perception::Patches(p) => {
                let (out, trace) = self.arch.encoder.forward(g, p)?;
                Ok((trace.0, all_tokens.then_some(out)))
            }
            Perception::Frames(frames) => {
                if frames.is_empty() {
                    return Err(Error::Empty("frames"));
                }
                if self.arch.variant.frame_mode == FrameMode::Single || frames.len() == 1 {
                    return self.encode_nodes(g, Perception::Patches(&frames[0]));
                }
                let mut sums: Option<(Vec<NodeId>, NodeId)> = None;
                for f in frames {
                    let (out, trace) = self.arch.encoder.forward(g, f)?;
                    sums = Some(match sums {
                        None => (trace.0, out),
                        Some((acc, tok)) => {
                            let acc = acc
                                .iter()
                                .zip(&trace.0)
                                .map(|(&a, &b)| g.add(a, b))
                                .collect::<Result<Vec<_>>>()?;
                            (acc, g.add(tok, out)?)
                        }
                    });
                }
                let (acc, tok) = sums.expect("at least one frame");
                let inv = T::one() / T::from_usize(frames.len()).expect("frame count fits the float type");
                let cls = acc.iter().map(|&a| g.scale(a, inv)).collect::<Result<Vec<_>>>()?;
                let tokens = if all_tokens { Some(g.scale(tok, inv)?) } else { None };
                Ok((cls, tokens))
            }
        }
    }

    /// Text logits conditioned on perception through the variant's pathway.
    pub fn forward_multimodal(
        &self,
        g: &mut Graph<'_, T>,
        perception: Perception<'_, T>,
        input_ids: &[usize],
    ) -> Result<MultimodalOutput> {
        let arch = &self.arch;
        let (cls, tokens) = if arch.schedule.is_some() {
            self.encode_nodes(g, perception)?
        } else {
            (Vec::new(), None)
        };
        let prompt = match (&arch.prompt, &arch.deep_prompt) {
            (Some(p), _) => Some(p.forward(g)?),
            (_, Some(dp)) => dp.layer(g, 0),
            _ => None,
        };
        let hooks = Hooks {
            arch,
            cls,
            tokens,
            injected: Default::default(),
        };
        let decoder = arch.decoder.forward(g, input_ids, prompt, &hooks)?;
        Ok(MultimodalOutput {
            decoder,
            injected: hooks.injected.into_inner(),
        })
    }

    /// Loads backbone values by name from `source`; names absent there are left alone.
    pub fn load_backbones(&mut self, source: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for (_, p) in source.iter() {
            if !(p.name.starts_with("encoder.") || p.name.starts_with("decoder.")) {
                continue;
            }
            if let Some(id) = self.params.id(&p.name) {
                self.params.set_data(id, p.tensor.data())?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn connection_kind(&self) -> Option<ConnectionKind> {
        self.arch.connection.as_ref().map(|c| c.kind)
    }
}
