use std::collections::BTreeMap;

use super::{
    ArchConfig, AttackHooks, GradientMessage, HeadConfig, LabelStore, LocalOutputMsg, NoAttack,
    Observation, ObservationAudit, TrainConfig, Visibility,
};
use crate::analysis::vib_mi_upper_bound;
use crate::defenses::{mid_total_loss, GradientDefense, MidPlacement, VibInit};
use crate::diffcore::{Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::harness::data::SplitDataset;
use crate::models::{BoundMlp, BoundVib, Checkpoint, GlobalHead, MlpModel, VibLayer, VibMode};

/// A feature-only participant. It has no label store and no head.
#[derive(Clone, Debug)]
pub struct PassiveParty {
    pub id: usize,
    pub model: MlpModel,
    pub features: Tensor,
    /// Bottleneck applied before sending, when it sits on this side.
    pub vib: Option<VibLayer>,
}

/// The label holder, running the global head.
#[derive(Clone, Debug)]
pub struct ActiveParty {
    pub id: usize,
    pub model: MlpModel,
    pub features: Tensor,
    pub head: GlobalHead,
    /// Bottlenecks applied to received outputs, keyed by sender id.
    pub vibs: BTreeMap<usize, VibLayer>,
    labels: LabelStore,
}

impl ActiveParty {
    pub fn labels(&self) -> &LabelStore {
        &self.labels
    }
}

/// Result of one training round.
#[derive(Clone, Debug)]
pub struct RoundOutcome {
    /// Cross-entropy plus every weighted bottleneck term, on both sides.
    pub loss: f64,
    pub ce: f64,
    /// `(party, λ, KL)` for each bottleneck, in party order.
    pub kls: Vec<(usize, f64, f64)>,
    /// Correct batch predictions before the update.
    pub correct: usize,
    pub outputs: Vec<LocalOutputMsg>,
    pub gradients: Vec<GradientMessage>,
}

/// Deterministic loss of a batch with bottlenecks in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kls: Vec<(usize, f64, f64)>,
    pub total: f64,
}

struct PassivePass {
    g: Graph,
    bound: BoundMlp,
    vib: Option<(BoundVib, Var)>,
    out: Var,
}

struct ActivePass {
    g: Graph,
    own: BoundMlp,
    head: Option<BoundMlp>,
    vibs: Vec<(usize, BoundVib)>,
    received: Vec<Var>,
    ce: Var,
    loss: Var,
    kls: Vec<(usize, f64, Var)>,
    logits: Var,
}

/// All parties of one federation plus the round state.
#[derive(Clone, Debug)]
pub struct VflSystem {
    passives: Vec<PassiveParty>,
    active: ActiveParty,
    config: TrainConfig,
    defense: GradientDefense,
    round: u64,
    audit: ObservationAudit,
}

const VIB_INIT_JITTER: f64 = 0.01;
const VIB_INIT_LOG_VAR: f64 = -6.0;

impl VflSystem {
    /// Builds parties `1..K` from a split dataset; party `K` is active.
    pub fn new(data: &SplitDataset, arch: &ArchConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let k = data.parties();
        if k < 2 {
            return Err(Error::config("need at least one passive and one active party"));
        }
        let classes = data.classes;
        let width = arch.local_output.unwrap_or(classes);
        if matches!(arch.head, HeadConfig::SoftmaxOfSum) && width != classes {
            return Err(Error::config(format!(
                "softmax-of-sum head needs local outputs of width {classes}, got {width}"
            )));
        }
        let seed = config.seed;
        let local = |id: usize, n_in: usize| -> Result<MlpModel> {
            let mut dims = vec![n_in];
            dims.extend_from_slice(&arch.local_hidden);
            dims.push(width);
            MlpModel::new(&dims, &mut Rng::named(seed, &format!("init/party/{id}")))
        };
        let passive_ids: Vec<usize> = (1..k).collect();
        let mut weights = BTreeMap::new();
        let mut placement = MidPlacement::Active;
        let mut bottleneck = None;
        let mut init = VibInit::Identity;
        if let Some(mid) = config.defense.mid() {
            weights = mid.weights(&passive_ids)?.into_iter().collect();
            placement = mid.placement;
            bottleneck = mid.bottleneck;
            init = mid.init;
        }
        let make_vib = |id: usize, lambda: f64| {
            let d = bottleneck.unwrap_or(width);
            let mut rng = Rng::named(seed, &format!("init/vib/{id}"));
            if init == VibInit::Identity && d == width {
                VibLayer::near_identity(width, lambda, VIB_INIT_JITTER, VIB_INIT_LOG_VAR, &mut rng)
            } else {
                VibLayer::new(width, d, width, lambda, &mut rng)
            }
        };

        let mut passives = Vec::with_capacity(k - 1);
        let mut active_vibs = BTreeMap::new();
        for &id in &passive_ids {
            let mut vib = None;
            if let Some(&lambda) = weights.get(&id) {
                let v = make_vib(id, lambda)?;
                match placement {
                    MidPlacement::Active => {
                        active_vibs.insert(id, v);
                    }
                    MidPlacement::Passive => vib = Some(v),
                }
            }
            passives.push(PassiveParty {
                id,
                model: local(id, data.train[id - 1].cols())?,
                features: data.train[id - 1].clone(),
                vib,
            });
        }
        let head = match &arch.head {
            HeadConfig::SoftmaxOfSum => GlobalHead::SoftmaxOfSum,
            HeadConfig::Trainable { hidden } => GlobalHead::trainable(
                k * width,
                hidden,
                classes,
                &mut Rng::named(seed, "init/head"),
            )?,
        };
        let active = ActiveParty {
            id: k,
            model: local(k, data.train[k - 1].cols())?,
            features: data.train[k - 1].clone(),
            head,
            vibs: active_vibs,
            labels: LabelStore::new(data.train_labels.clone(), classes, k),
        };
        Ok(Self {
            passives,
            active,
            config: config.clone(),
            defense: GradientDefense::new(config.defense.clone())?,
            round: 0,
            audit: ObservationAudit::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn parties(&self) -> usize {
        self.passives.len() + 1
    }

    pub fn n_train(&self) -> usize {
        self.active.labels.len()
    }

    pub fn passives(&self) -> &[PassiveParty] {
        &self.passives
    }

    pub fn passive(&self, id: usize) -> Option<&PassiveParty> {
        self.passives.iter().find(|p| p.id == id)
    }

    pub fn passive_mut(&mut self, id: usize) -> Option<&mut PassiveParty> {
        self.passives.iter_mut().find(|p| p.id == id)
    }

    pub fn active(&self) -> &ActiveParty {
        &self.active
    }

    pub fn active_mut(&mut self) -> &mut ActiveParty {
        &mut self.active
    }

    pub fn audit(&self) -> ObservationAudit {
        self.audit
    }

    pub fn rounds_done(&self) -> u64 {
        self.round
    }

    /// The bottleneck protecting passive party `id`, on whichever side.
    pub fn vib(&self, id: usize) -> Option<&VibLayer> {
        self.active
            .vibs
            .get(&id)
            .or_else(|| self.passive(id).and_then(|p| p.vib.as_ref()))
    }

    pub fn vib_mut(&mut self, id: usize) -> Option<&mut VibLayer> {
        if let Some(v) = self.active.vibs.get_mut(&id) {
            return Some(v);
        }
        self.passives
            .iter_mut()
            .find(|p| p.id == id)
            .and_then(|p| p.vib.as_mut())
    }

    pub(crate) fn end_epoch(&mut self) {
        self.defense.end_epoch();
    }

    fn vib_rng(&self, party: usize, round: u64) -> Rng {
        Rng::named(self.config.seed, &format!("vib/{party}")).derive(round)
    }

    fn passive_forward(
        &self,
        p: &PassiveParty,
        indices: &[usize],
        hooks: &mut dyn AttackHooks,
        round: u64,
        train: bool,
    ) -> Result<(PassivePass, LocalOutputMsg)> {
        let mut g = Graph::new();
        let bound = p.model.bind(&mut g);
        let hooked = hooks.attacker() == Some(p.id);
        let mut x = p.features.select_rows(indices);
        if hooked {
            hooks.poison_features(indices, &mut x);
        }
        let xv = g.constant(x);
        let h = p.model.forward(&mut g, &bound, xv)?;
        let (out, vib) = match &p.vib {
            Some(v) => {
                let vb = v.bind(&mut g);
                let o = if train {
                    let mut rng = self.vib_rng(p.id, round);
                    v.forward(&mut g, &vb, h, VibMode::Train(&mut rng))?
                } else {
                    v.forward(&mut g, &vb, h, VibMode::Eval)?
                };
                (o.z, Some((vb, o.kl)))
            }
            None => (h, None),
        };
        let mut sent = g.value(out).clone();
        if hooked {
            hooks.intercept_output(indices, &mut sent);
        }
        let msg = LocalOutputMsg {
            party: p.id,
            indices: indices.to_vec(),
            outputs: sent,
        };
        Ok((PassivePass { g, bound, vib, out }, msg))
    }

    fn active_forward(
        &self,
        msgs: &[LocalOutputMsg],
        indices: &[usize],
        round: u64,
        train: bool,
    ) -> Result<ActivePass> {
        let a = &self.active;
        let mut g = Graph::new();
        let own = a.model.bind(&mut g);
        let head = a.head.bind(&mut g);
        let mut parts = Vec::with_capacity(msgs.len() + 1);
        let mut received = Vec::with_capacity(msgs.len());
        let mut vibs = Vec::new();
        let mut kls = Vec::new();
        for m in msgs {
            if m.outputs.rows() != indices.len() {
                return Err(Error::Consistency(format!(
                    "party {} sent {} rows for a batch of {}",
                    m.party,
                    m.outputs.rows(),
                    indices.len()
                )));
            }
            let r = g.param(m.outputs.clone());
            received.push(r);
            match a.vibs.get(&m.party) {
                Some(v) => {
                    let vb = v.bind(&mut g);
                    let o = if train {
                        let mut rng = self.vib_rng(m.party, round);
                        v.forward(&mut g, &vb, r, VibMode::Train(&mut rng))?
                    } else {
                        v.forward(&mut g, &vb, r, VibMode::Eval)?
                    };
                    parts.push(o.z);
                    kls.push((m.party, v.lambda(), o.kl));
                    vibs.push((m.party, vb));
                }
                None => parts.push(r),
            }
        }
        let x = g.constant(a.features.select_rows(indices));
        let h = a.model.forward(&mut g, &own, x)?;
        parts.push(h);
        let logits = a.head.predict(&mut g, head.as_ref(), &parts)?;
        let labels = a.labels.read(a.id, "loss", indices);
        let (ce, _) = g.softmax_cross_entropy(logits, &labels)?;
        let weighted: Vec<(f64, Var)> = kls.iter().map(|&(_, l, kl)| (l, kl)).collect();
        let loss = mid_total_loss(&mut g, ce, &weighted)?;
        Ok(ActivePass {
            g,
            own,
            head,
            vibs,
            received,
            ce,
            loss,
            kls,
            logits,
        })
    }

    /// One round on `indices`: forwards, loss, gradient exchange, updates.
    ///
    /// Works for every placement; the bottlenecks present in the system
    /// decide which form of the loss is used.
    pub fn train_round(&mut self, indices: &[usize], hooks: &mut dyn AttackHooks) -> Result<RoundOutcome> {
        let round = self.round;
        self.round += 1;
        let mut passes = Vec::with_capacity(self.passives.len());
        let mut outputs = Vec::with_capacity(self.passives.len());
        for p in &self.passives {
            let (pass, msg) = self.passive_forward(p, indices, hooks, round, true)?;
            passes.push(pass);
            outputs.push(msg);
        }
        let ap = self.active_forward(&outputs, indices, round, true)?;
        let grads = ap.g.backward(ap.loss)?;
        let ce = ap.g.scalar(ap.ce);
        let mut loss = ap.g.scalar(ap.loss);
        let mut kls: Vec<(usize, f64, f64)> = ap
            .kls
            .iter()
            .map(|&(id, l, kl)| (id, l, ap.g.scalar(kl)))
            .collect();
        let labels = self.active.labels.read(self.active.id, "accuracy", indices);
        let correct = count_correct(ap.g.value(ap.logits), &labels);

        let base = Rng::named(self.config.seed, "defense").derive(round);
        let keys: Vec<u64> = indices.iter().map(|&i| i as u64).collect();
        let mut gradients = Vec::with_capacity(outputs.len());
        for (m, &r) in outputs.iter().zip(&ap.received) {
            let mut rows = grads.require(r)?.clone();
            self.defense.apply(&mut rows, &base.derive(m.party as u64), &keys)?;
            gradients.push(GradientMessage {
                party: m.party,
                indices: m.indices.clone(),
                per_sample: rows,
                visibility: self.config.visibility,
            });
        }

        let cfg = &self.config;
        let a = &mut self.active;
        a.model.sgd_update_clipped(&ap.own, &grads, cfg.lr_local, cfg.clip())?;
        if let (GlobalHead::TrainableLinear(m), Some(b)) = (&mut a.head, &ap.head) {
            m.sgd_update_clipped(b, &grads, cfg.lr_head, cfg.clip())?;
        }
        for (id, vb) in &ap.vibs {
            let v = a.vibs.get_mut(id).expect("bound from this map");
            v.sgd_update(vb, &grads, cfg.lr_vib, cfg.clip())?;
        }

        for ((p, pass), gm) in self.passives.iter_mut().zip(passes).zip(&gradients) {
            let hooked = hooks.attacker() == Some(p.id);
            let mut rows = gm.per_sample.clone();
            if hooked && gm.visibility == Visibility::SampleLevel {
                hooks.observe(Observation::SampleLevel {
                    indices: &gm.indices,
                    rows: &rows,
                });
                self.audit.sample_level_rows += rows.rows();
                hooks.replace_gradient(&gm.indices, &mut rows);
            }
            let PassivePass { mut g, bound, vib, out } = pass;
            let surrogate = g.dot_const(out, rows)?;
            let local_loss = match (&vib, &p.vib) {
                (Some((_, kl)), Some(v)) => {
                    let kl_val = g.scalar(*kl);
                    kls.push((p.id, v.lambda(), kl_val));
                    loss += v.lambda() * kl_val;
                    mid_total_loss(&mut g, surrogate, &[(v.lambda(), *kl)])?
                }
                _ => surrogate,
            };
            let pg = g.backward(local_loss)?;
            let mut lr = cfg.lr_local;
            if hooked {
                let param_grads = p.model.gradients(&bound, &pg)?;
                hooks.observe(Observation::BatchLevel {
                    batch_size: indices.len(),
                    param_grads: &param_grads,
                });
                self.audit.batch_level_grads += 1;
                lr *= hooks.local_lr_scale();
            }
            p.model.sgd_update_clipped(&bound, &pg, lr, cfg.clip())?;
            if let (Some(v), Some((vb, _))) = (&mut p.vib, &vib) {
                v.sgd_update(vb, &pg, cfg.lr_vib, cfg.clip())?;
            }
        }
        kls.sort_by_key(|k| k.0);
        Ok(RoundOutcome {
            loss,
            ce,
            kls,
            correct,
            outputs,
            gradients,
        })
    }

    /// Round for a system whose bottlenecks sit at the active party.
    pub fn train_round_active_mid(
        &mut self,
        indices: &[usize],
        hooks: &mut dyn AttackHooks,
    ) -> Result<RoundOutcome> {
        if self.passives.iter().any(|p| p.vib.is_some()) {
            return Err(Error::config("system has passive-side bottlenecks"));
        }
        self.train_round(indices, hooks)
    }

    /// Round for a system whose bottlenecks sit at passive parties.
    pub fn train_round_passive_mid(
        &mut self,
        indices: &[usize],
        hooks: &mut dyn AttackHooks,
    ) -> Result<RoundOutcome> {
        if !self.active.vibs.is_empty() {
            return Err(Error::config("system has active-side bottlenecks"));
        }
        self.train_round(indices, hooks)
    }

    /// Loss of a training batch with every bottleneck in eval mode.
    pub fn loss_on(&self, indices: &[usize]) -> Result<LossBreakdown> {
        let mut outputs = Vec::new();
        let mut kls = Vec::new();
        for p in &self.passives {
            let (pass, msg) = self.passive_forward(p, indices, &mut NoAttack, 0, false)?;
            if let (Some((_, kl)), Some(v)) = (&pass.vib, &p.vib) {
                kls.push((p.id, v.lambda(), pass.g.scalar(*kl)));
            }
            outputs.push(msg);
        }
        let ap = self.active_forward(&outputs, indices, 0, false)?;
        let mut total = ap.g.scalar(ap.loss);
        for &(_, l, kl) in &kls {
            total += l * kl;
        }
        kls.extend(ap.kls.iter().map(|&(id, l, kl)| (id, l, ap.g.scalar(kl))));
        kls.sort_by_key(|k| k.0);
        Ok(LossBreakdown {
            ce: ap.g.scalar(ap.ce),
            kls,
            total,
        })
    }

    /// Eval-mode logits for per-party feature blocks (`features[k-1]` for
    /// party `k`). `missing` zeroes the listed passive parties' outputs on
    /// rows marked `true`.
    pub fn predict_logits(&self, features: &[Tensor], missing: &[(usize, Vec<bool>)]) -> Result<Tensor> {
        if features.len() != self.parties() {
            return Err(Error::shape(format!(
                "{} feature blocks for {} parties",
                features.len(),
                self.parties()
            )));
        }
        let mut parts = Vec::with_capacity(features.len());
        for p in &self.passives {
            let mut out = p.model.predict(&features[p.id - 1])?;
            if let Some(v) = &p.vib {
                out = v.predict(&out)?.0;
            }
            if let Some((_, mask)) = missing.iter().find(|(id, _)| *id == p.id) {
                zero_rows(&mut out, mask)?;
            }
            if let Some(v) = self.active.vibs.get(&p.id) {
                out = v.predict(&out)?.0;
            }
            parts.push(out);
        }
        parts.push(self.active.model.predict(&features[self.active.id - 1])?);
        self.active.head.predict_values(&parts)
    }

    pub fn predict(&self, features: &[Tensor], missing: &[(usize, Vec<bool>)]) -> Result<Vec<usize>> {
        Ok(argmax(&self.predict_logits(features, missing)?))
    }

    /// Dataset-mean KL of each bottleneck's encoder, in party order.
    pub fn kl_bounds(&self, features: &[Tensor]) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        for p in &self.passives {
            if let Some(v) = self.vib(p.id) {
                let h = p.model.predict(&features[p.id - 1])?;
                let (_, mu, lv) = v.predict(&h)?;
                out.push((p.id, vib_mi_upper_bound(&mu, &lv)?));
            }
        }
        Ok(out)
    }

    /// Every model, named `party{k}`, `head`, `vib{k}.encoder`, `vib{k}.decoder`.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for p in &self.passives {
            c.push_mlp(&format!("party{}", p.id), &p.model);
        }
        c.push_mlp(&format!("party{}", self.active.id), &self.active.model);
        if let GlobalHead::TrainableLinear(m) = &self.active.head {
            c.push_mlp("head", m);
        }
        for p in &self.passives {
            if let Some(v) = self.vib(p.id) {
                c.push_mlp(&format!("vib{}.encoder", p.id), &v.encoder);
                c.push_mlp(&format!("vib{}.decoder", p.id), &v.decoder);
            }
        }
        c
    }
}

fn zero_rows(t: &mut Tensor, mask: &[bool]) -> Result<()> {
    if mask.len() != t.rows() {
        return Err(Error::shape(format!(
            "mask of length {} for {} rows",
            mask.len(),
            t.rows()
        )));
    }
    for (i, &m) in mask.iter().enumerate() {
        if m {
            t.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(())
}

/// Row-wise arg-max, first index on ties.
pub fn argmax(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}
