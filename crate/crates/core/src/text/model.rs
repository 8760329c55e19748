use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TextRecord, Tokenizer};
use crate::error::{Error, Result};
use crate::io_util;
use crate::numeric::{self, bind, checkpoint, NodeId, Params, Tensor, ValueGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub max_tokens: usize,
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32768,
            dim: 64,
            layers: 2,
            max_tokens: 256,
            head_hidden: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.layers == 0 || self.head_hidden == 0 {
            return Err(Error::invalid(
                "vocab_size, dim, layers and head_hidden must be positive",
            ));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("max_tokens must be positive"));
        }
        Ok(())
    }

    const KEYS: [&'static str; 5] = ["vocab_size", "dim", "layers", "max_tokens", "head_hidden"];

    fn values(&self) -> [usize; 5] {
        [
            self.vocab_size,
            self.dim,
            self.layers,
            self.max_tokens,
            self.head_hidden,
        ]
    }
}

/// Parameter handles of one model bound into a graph.
pub(crate) struct Bound {
    table: NodeId,
    layers: Vec<(NodeId, NodeId)>,
    head: [NodeId; 4],
}

/// Shared text encoder plus the pairwise prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct BiEncoder {
    cfg: EncoderConfig,
    params: Params,
}

const TABLE: &str = "enc.table";
const HEAD: [&str; 4] = ["head.w1", "head.b1", "head.w2", "head.b2"];

fn layer_names(i: usize) -> (String, String) {
    (format!("enc.l{i}.w"), format!("enc.l{i}.b"))
}

impl BiEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = io_util::derived_rng(seed, "bi-encoder-init");
        let mut params = Params::new();
        params.insert(
            TABLE.into(),
            Tensor::randn(&[cfg.vocab_size, cfg.dim], 1.0, &mut rng),
        );
        for i in 0..cfg.layers {
            let (w, b) = layer_names(i);
            params.insert(w, numeric::init_weight(cfg.dim, cfg.dim, &mut rng));
            params.insert(b, numeric::init_bias(cfg.dim));
        }
        params.insert(
            HEAD[0].into(),
            numeric::init_weight(2 * cfg.dim, cfg.head_hidden, &mut rng),
        );
        params.insert(HEAD[1].into(), numeric::init_bias(cfg.head_hidden));
        params.insert(
            HEAD[2].into(),
            numeric::init_weight(cfg.head_hidden, 1, &mut rng),
        );
        params.insert(HEAD[3].into(), numeric::init_bias(1));
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::new(self.cfg.vocab_size, self.cfg.max_tokens)
    }

    /// Token ids of the record including its kind prefix.
    pub fn tokens(&self, record: &TextRecord) -> Vec<u32> {
        self.tokenizer().tokenize(&record.prompt())
    }

    pub(crate) fn bind(
        &self,
        g: &mut ValueGraph,
        train_encoder: bool,
        train_head: bool,
    ) -> Result<Bound> {
        let table = bind(g, &self.params, TABLE, train_encoder)?;
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for i in 0..self.cfg.layers {
            let (w, b) = layer_names(i);
            layers.push((
                bind(g, &self.params, &w, train_encoder)?,
                bind(g, &self.params, &b, train_encoder)?,
            ));
        }
        let mut head = [table; 4];
        for (slot, name) in head.iter_mut().zip(HEAD) {
            *slot = bind(g, &self.params, name, train_head)?;
        }
        Ok(Bound {
            table,
            layers,
            head,
        })
    }

    /// Unit-norm embeddings for a batch of token lists, one row each.
    pub(crate) fn encode_tokens(
        &self,
        g: &mut ValueGraph,
        b: &Bound,
        lists: &[&[u32]],
    ) -> Result<NodeId> {
        if lists.iter().any(|l| l.is_empty()) {
            return Err(Error::invalid("cannot encode an empty token list"));
        }
        let mut idx = Vec::new();
        let mut seg = Vec::new();
        for (row, list) in lists.iter().enumerate() {
            idx.extend(list.iter().map(|&t| t as usize));
            seg.extend(std::iter::repeat(row).take(list.len()));
        }
        let rows = g.gather_rows(b.table, idx)?;
        let mut h = g.segment_mean(rows, seg, lists.len())?;
        let mut layer_sum: Option<NodeId> = None;
        for &(w, bias) in &b.layers {
            let z = g.matmul(h, w)?;
            let z = g.add(z, bias)?;
            h = g.leaky_relu(z)?;
            layer_sum = Some(match layer_sum {
                None => h,
                Some(s) => g.add(s, h)?,
            });
        }
        // Averaging before the norm only rescales, but it keeps the pooled
        // value meaningful for callers that inspect it.
        let avg = g.scale(layer_sum.unwrap(), 1.0 / b.layers.len() as f64)?;
        g.l2_normalize(avg)
    }

    /// Probabilities `[B, 1]` from profile, resume and document embeddings.
    pub(crate) fn head(
        &self,
        g: &mut ValueGraph,
        b: &Bound,
        profile: NodeId,
        resume: NodeId,
        doc: NodeId,
    ) -> Result<NodeId> {
        let pd = g.mul(profile, doc)?;
        let rd = g.mul(resume, doc)?;
        let x = g.concat(&[pd, rd], 1)?;
        let z = g.matmul(x, b.head[0])?;
        let z = g.add(z, b.head[1])?;
        let z = g.leaky_relu(z)?;
        let z = g.matmul(z, b.head[2])?;
        let z = g.add(z, b.head[3])?;
        g.sigmoid(z)
    }

    pub fn embed(&self, record: &TextRecord) -> Result<Vec<f64>> {
        Ok(self.embed_many(std::slice::from_ref(record))?.remove(0))
    }

    pub fn embed_many(&self, records: &[TextRecord]) -> Result<Vec<Vec<f64>>> {
        let tokens: Vec<Vec<u32>> = records.iter().map(|r| self.tokens(r)).collect();
        self.embed_tokens(&tokens)
    }

    pub(crate) fn embed_tokens(&self, tokens: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(256) {
            let mut g = ValueGraph::new();
            let b = self.bind(&mut g, false, false)?;
            let lists: Vec<&[u32]> = chunk.iter().map(|t| t.as_slice()).collect();
            let e = self.encode_tokens(&mut g, &b, &lists)?;
            let v = g.value(e);
            out.extend((0..v.rows()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn predict_pair(&self, profile: &[f64], resume: &[f64], doc: &[f64]) -> Result<f64> {
        let d = self.cfg.dim;
        for (name, v) in [("profile", profile), ("resume", resume), ("document", doc)] {
            if v.len() != d {
                return Err(Error::invalid(format!(
                    "{name} embedding has dim {}, model expects {d}",
                    v.len()
                )));
            }
        }
        let mut g = ValueGraph::new();
        let b = self.bind(&mut g, false, false)?;
        let p = g.input(Tensor::matrix(1, d, profile.to_vec())?);
        let r = g.input(Tensor::matrix(1, d, resume.to_vec())?);
        let q = g.input(Tensor::matrix(1, d, doc.to_vec())?);
        let prob = self.head(&mut g, &b, p, r, q)?;
        Ok(g.value(prob).data()[0])
    }

    pub fn to_entries(&self) -> BTreeMap<String, Tensor> {
        let mut entries = self.params.clone();
        for (k, v) in EncoderConfig::KEYS.iter().zip(self.cfg.values()) {
            entries.insert(format!("config.{k}"), Tensor::scalar(v as f64));
        }
        entries
    }

    pub fn from_entries(mut entries: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut vals = [0usize; 5];
        for (slot, k) in vals.iter_mut().zip(EncoderConfig::KEYS) {
            let t = entries
                .remove(&format!("config.{k}"))
                .ok_or_else(|| Error::format("encoder checkpoint", format!("missing config.{k}")))?;
            *slot = t.data().first().copied().unwrap_or(0.0) as usize;
        }
        let cfg = EncoderConfig {
            vocab_size: vals[0],
            dim: vals[1],
            layers: vals[2],
            max_tokens: vals[3],
            head_hidden: vals[4],
        };
        let fresh = Self::new(cfg.clone(), 0)?;
        for (name, t) in fresh.params {
            match entries.get(&name) {
                Some(found) if found.shape() == t.shape() => {}
                Some(found) => {
                    return Err(Error::format(
                        "encoder checkpoint",
                        format!("{name} has shape {:?}, expected {:?}", found.shape(), t.shape()),
                    ))
                }
                None => {
                    return Err(Error::format(
                        "encoder checkpoint",
                        format!("missing parameter {name}"),
                    ))
                }
            }
        }
        Ok(Self {
            cfg,
            params: entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::TextKind;

    fn tiny() -> BiEncoder {
        BiEncoder::new(
            EncoderConfig {
                vocab_size: 97,
                dim: 8,
                layers: 2,
                max_tokens: 16,
                head_hidden: 4,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let m = tiny();
        for text in ["", "rust engineer", "a b c d e f g h i j k l m n o p q r"] {
            let e = m.embed(&TextRecord::new(1, TextKind::MemberResume, text)).unwrap();
            let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn prefix_distinguishes_kinds() {
        let m = tiny();
        let a = m.embed(&TextRecord::new(1, TextKind::MemberProfile, "data")).unwrap();
        let b = m.embed(&TextRecord::new(1, TextKind::JobDescription, "data")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_head_predicts_half() {
        let mut m = tiny();
        for name in HEAD {
            let t = m.params_mut().get_mut(name).unwrap();
            t.scale_in_place(0.0);
        }
        let v = vec![0.3; 8];
        assert_eq!(m.predict_pair(&v, &v, &v).unwrap(), 0.5);
        assert!(m.predict_pair(&v, &v, &v[..7]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let back = BiEncoder::from_entries(checkpoint::decode(&checkpoint::encode(&m.to_entries())).unwrap())
            .unwrap();
        assert_eq!(back, m);
    }
}
