use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::{Prompt, PromptKind};
use crate::backbone::BackboneConfig;
use crate::container;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::fourier::{amplitude_cosine, AmplitudeKey, Planes};

/// One frozen `(k_t, p_s^t)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub key: AmplitudeKey,
    pub dsp: Prompt,
}

impl BankEntry {
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dsp.checksum().hash(&mut h);
        self.key.domain_index.hash(&mut h);
        for v in self.key.amplitude.data() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// JSON companion of a serialized bank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankSidecar {
    pub time_step: usize,
    pub l_half: usize,
    pub m: usize,
    pub layers: BTreeMap<String, Vec<usize>>,
}

/// The latest domain-invariant prompt plus an append-only list of
/// domain-specific prompts with their amplitude keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptBank {
    dip: Option<Prompt>,
    entries: Vec<BankEntry>,
    dip_step: usize,
}

fn dsp_name(t: usize) -> String {
    format!("dsp{t:03}")
}

fn key_name(t: usize) -> String {
    format!("key{t:03}")
}

impl PromptBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of appended entries, which is the current time step.
    pub fn time_step(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dip(&self) -> Option<&Prompt> {
        self.dip.as_ref()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    /// Time step at which the DIP was last written (0 if never).
    pub fn dip_step(&self) -> usize {
        self.dip_step
    }

    fn check_key(cfg: &BackboneConfig, key: &AmplitudeKey) -> Result<()> {
        let want = (cfg.image_size, cfg.image_size, cfg.channels);
        if key.amplitude.dims() != want {
            return Err(Error::Shape {
                context: "amplitude key".into(),
                expected: format!("{want:?}"),
                actual: format!("{:?}", key.amplitude.dims()),
            });
        }
        Ok(())
    }

    /// Appends `[k_t, p_s^t]`. Earlier entries are never touched.
    pub fn append_entry(&mut self, cfg: &BackboneConfig, key: AmplitudeKey, dsp: Prompt) -> Result<()> {
        if dsp.kind != PromptKind::Dsp {
            return Err(Error::PromptLayout("bank entries hold domain-specific prompts".into()));
        }
        dsp.validate(cfg)?;
        Self::check_key(cfg, &key)?;
        self.entries.push(BankEntry { key, dsp });
        Ok(())
    }

    /// Writes the DIP for the current time step. Allowed once per step.
    pub fn set_dip(&mut self, cfg: &BackboneConfig, dip: Prompt) -> Result<()> {
        if dip.kind != PromptKind::Dip {
            return Err(Error::PromptLayout("expected a domain-invariant prompt".into()));
        }
        dip.validate(cfg)?;
        let t = self.time_step();
        if t == 0 {
            return Err(Error::Empty("prompt bank".into()));
        }
        if self.dip.is_some() && self.dip_step == t {
            return Err(Error::PromptLayout(format!("DIP already written at time step {t}")));
        }
        self.dip = Some(dip);
        self.dip_step = t;
        Ok(())
    }

    /// Index (0-based) of the entry whose key is most cosine-similar to
    /// `amplitude`. Ties go to the lowest index.
    pub fn select_dsp(&self, amplitude: &Planes) -> Result<usize> {
        if self.entries.is_empty() {
            return Err(Error::Empty("prompt bank".into()));
        }
        let mut best = (0, f32::NEG_INFINITY);
        for (j, e) in self.entries.iter().enumerate() {
            let gamma = amplitude_cosine(amplitude, &e.key.amplitude)?;
            if gamma > best.1 {
                best = (j, gamma);
            }
        }
        Ok(best.0)
    }

    fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(dip) = &self.dip {
            out.extend(dip.named_tensors("dip").into_iter().map(|(n, t)| (n, t.clone())));
        }
        for (i, e) in self.entries.iter().enumerate() {
            let t = i + 1;
            out.extend(e.dsp.named_tensors(&dsp_name(t)).into_iter().map(|(n, x)| (n, x.clone())));
            let (h, w, c) = e.key.amplitude.dims();
            let key = Tensor::new([c, h, w], e.key.amplitude.data().to_vec()).expect("key dims");
            out.push((key_name(t), key));
        }
        out
    }

    /// Exact serialized size in bytes.
    pub fn bank_bytes(&self) -> usize {
        let named = self.named();
        container::encoded_len(named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.named();
        container::encode(named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn sidecar(&self, cfg: &BackboneConfig) -> BankSidecar {
        BankSidecar {
            time_step: self.time_step(),
            l_half: cfg.prompt_half_len,
            m: cfg.embed_dim,
            layers: BTreeMap::from([
                ("dip".to_string(), PromptKind::Dip.layers(cfg)),
                ("dsp".to_string(), PromptKind::Dsp.layers(cfg)),
            ]),
        }
    }

    /// Rebuilds a bank from [`PromptBank::to_bytes`] output.
    pub fn from_bytes(cfg: &BackboneConfig, bytes: &[u8]) -> Result<Self> {
        let tensors: BTreeMap<String, Tensor> = container::read_tensors(bytes)?.into_iter().collect();
        let take = |prefix: &str, kind: PromptKind| Prompt::from_tensors(kind, cfg, prefix, &tensors);
        let mut bank = PromptBank::new();
        let mut t = 1;
        while let Some(key) = tensors.get(&key_name(t)) {
            let dsp = take(&dsp_name(t), PromptKind::Dsp)?
                .ok_or_else(|| Error::Data(format!("bank is missing {}", dsp_name(t))))?;
            let &[c, h, w] = key.shape() else {
                return Err(Error::Data(format!("{} must have rank 3", key_name(t))));
            };
            let amplitude = Planes::new(c, h, w, key.data().to_vec()).expect("tensor dims");
            bank.append_entry(
                cfg,
                AmplitudeKey {
                    amplitude,
                    domain_index: t,
                },
                dsp,
            )?;
            t += 1;
        }
        if let Some(dip) = take("dip", PromptKind::Dip)? {
            bank.dip = Some(dip);
            bank.dip_step = bank.time_step();
        }
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            prompt_half_len: 2,
            ..Default::default()
        }
    }

    fn key(cfg: &BackboneConfig, fill: f32, t: usize) -> AmplitudeKey {
        let mut data = vec![0.1; cfg.channels * cfg.image_size * cfg.image_size];
        data[t] = fill;
        AmplitudeKey {
            amplitude: Planes::new(cfg.channels, cfg.image_size, cfg.image_size, data).unwrap(),
            domain_index: t,
        }
    }

    #[test]
    fn empty_bank_is_header_only() {
        assert_eq!(PromptBank::new().bank_bytes(), container::HEADER_BYTES);
        assert!(PromptBank::new().select_dsp(&Planes::zeros(3, 8, 8)).is_err());
    }

    #[test]
    fn dip_write_once_per_step() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bank = PromptBank::new();
        assert!(bank.set_dip(&cfg, Prompt::init(PromptKind::Dip, &cfg, &mut rng)).is_err());
        bank.append_entry(&cfg, key(&cfg, 5.0, 1), Prompt::init(PromptKind::Dsp, &cfg, &mut rng))
            .unwrap();
        bank.set_dip(&cfg, Prompt::init(PromptKind::Dip, &cfg, &mut rng)).unwrap();
        assert!(bank.set_dip(&cfg, Prompt::init(PromptKind::Dip, &cfg, &mut rng)).is_err());
        bank.append_entry(&cfg, key(&cfg, 5.0, 2), Prompt::init(PromptKind::Dsp, &cfg, &mut rng))
            .unwrap();
        bank.set_dip(&cfg, Prompt::init(PromptKind::Dip, &cfg, &mut rng)).unwrap();
        assert_eq!(bank.dip_step(), 2);
    }

    #[test]
    fn serialization_round_trip() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bank = PromptBank::new();
        for t in 1..=3 {
            bank.append_entry(&cfg, key(&cfg, 3.0, t), Prompt::init(PromptKind::Dsp, &cfg, &mut rng))
                .unwrap();
        }
        bank.set_dip(&cfg, Prompt::init(PromptKind::Dip, &cfg, &mut rng)).unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(bytes.len(), bank.bank_bytes());
        let back = PromptBank::from_bytes(&cfg, &bytes).unwrap();
        assert_eq!(back, bank);
        assert_eq!(bank.select_dsp(&key(&cfg, 3.0, 2).amplitude).unwrap(), 1);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bank = PromptBank::new();
        let bad_key = AmplitudeKey {
            amplitude: Planes::zeros(3, 4, 4),
            domain_index: 1,
        };
        let dsp = Prompt::init(PromptKind::Dsp, &cfg, &mut rng);
        assert!(bank.append_entry(&cfg, bad_key, dsp.clone()).is_err());
        let dip = Prompt::init(PromptKind::Dip, &cfg, &mut rng);
        assert!(bank.append_entry(&cfg, key(&cfg, 1.0, 1), dip).is_err());
        assert!(bank.is_empty());
    }
}
