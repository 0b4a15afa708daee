//! Weight-averaging collusion between two fingerprinted decoders and the
//! per-bit statistics of what the extractor reads from the result.

use serde::{Deserialize, Serialize};

use crate::attribution::decode_logits;
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::nets::{BakedDecoder, Model};
use crate::registry::WatermarkMessage;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Element-wise mean of every tensor of two baked decoders.
pub fn collude_models(a: &BakedDecoder, b: &BakedDecoder) -> Result<BakedDecoder> {
    if a.config != b.config {
        return Err(invalid("colluding decoders have different architectures"));
    }
    let (ca, cb) = (a.to_checkpoint(), b.to_checkpoint());
    let mut out = Checkpoint::new(true, ca.meta.clone());
    for ((na, ta), (nb, tb)) in ca.tensors().iter().zip(cb.tensors()) {
        if na != nb {
            return Err(Error::Checkpoint(format!("tensor order differs: {na} vs {nb}")));
        }
        ta.expect_same_shape(tb, "collude")?;
        let mean: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| 0.5 * x + 0.5 * y).collect();
        out.push(na.clone(), Tensor::new(ta.shape(), mean)?)?;
    }
    BakedDecoder::from_checkpoint(&out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitCondition {
    #[serde(rename = "00")]
    Both0,
    #[serde(rename = "11")]
    Both1,
    #[serde(rename = "01")]
    ZeroOne,
    #[serde(rename = "10")]
    OneZero,
}

impl BitCondition {
    pub fn of(a: u8, b: u8) -> Self {
        match (a, b) {
            (0, 0) => Self::Both0,
            (1, 1) => Self::Both1,
            (0, _) => Self::ZeroOne,
            _ => Self::OneZero,
        }
    }

    pub fn agrees(self) -> bool {
        matches!(self, Self::Both0 | Self::Both1)
    }
}

/// Summary of extracted bits from a colluded decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollusionReport {
    pub images: usize,
    pub conditions: Vec<BitCondition>,
    /// Mean extracted bit per position.
    pub extracted_mean: Vec<f64>,
    /// Over agreeing positions: fraction of extracted bits equal to the shared bit.
    pub agreeing_match_rate: f64,
    /// Over differing positions: moments of `m^j − m₂` with `m₂ = 0.5`.
    pub differing_mean: f64,
    pub differing_variance: f64,
    pub differing_third_moment: f64,
    /// Counts of `m^j − m₂ = −0.5` and `+0.5`.
    pub differing_histogram: [usize; 2],
}

impl CollusionReport {
    /// Per differing position, the mean of `m^j − m₂`.
    pub fn differing_position_means(&self) -> Vec<f64> {
        self.conditions
            .iter()
            .zip(&self.extracted_mean)
            .filter(|(c, _)| !c.agrees())
            .map(|(_, &m)| m - 0.5)
            .collect()
    }
}

pub fn collusion_bit_stats(
    model: &Model,
    colluded: &BakedDecoder,
    m0: &WatermarkMessage,
    m1: &WatermarkMessage,
    latents: &[Tensor],
    n_images: usize,
    seed: u64,
) -> Result<CollusionReport> {
    if m0.len() != m1.len() {
        return Err(invalid("messages differ in length"));
    }
    if latents.is_empty() || n_images == 0 {
        return Err(invalid("collusion statistics need latents and a positive image count"));
    }
    let k = m0.len();
    let conditions: Vec<BitCondition> = m0.bits().iter().zip(m1.bits()).map(|(&a, &b)| BitCondition::of(a, b)).collect();
    let mut noise = Rng::new(seed);
    let mut ones = vec![0usize; k];
    let (mut agree_hits, mut agree_total) = (0usize, 0usize);
    let mut devs = Vec::new();
    for i in 0..n_images {
        let img = colluded.decode(&latents[i % latents.len()], Some(&mut noise))?;
        let bits = decode_logits(&model.extract(&img)?);
        if bits.len() != k {
            return Err(invalid("extractor output length differs from the messages"));
        }
        for (j, &b) in bits.iter().enumerate() {
            ones[j] += b as usize;
            if conditions[j].agrees() {
                agree_total += 1;
                agree_hits += (b == m0.bits()[j]) as usize;
            } else {
                devs.push(b as f64 - 0.5);
            }
        }
    }
    let n = devs.len().max(1) as f64;
    let mean = devs.iter().sum::<f64>() / n;
    let var = devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let third = devs.iter().map(|d| (d - mean).powi(3)).sum::<f64>() / n;
    let neg = devs.iter().filter(|&&d| d < 0.0).count();
    Ok(CollusionReport {
        images: n_images,
        conditions,
        extracted_mean: ones.iter().map(|&c| c as f64 / n_images as f64).collect(),
        agreeing_match_rate: if agree_total == 0 {
            f64::NAN
        } else {
            agree_hits as f64 / agree_total as f64
        },
        differing_mean: if devs.is_empty() { f64::NAN } else { mean },
        differing_variance: var,
        differing_third_moment: third,
        differing_histogram: [neg, devs.len() - neg],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelConfig;
    use crate::registry::sample_message;
    use crate::wib::WibOptions;

    fn baked(seed: u64) -> (Model, BakedDecoder, BakedDecoder) {
        let model = Model::new(&ModelConfig::default(), seed).unwrap();
        let mut rng = Rng::new(seed);
        let a = model.bake(&sample_message(16, &mut rng).unwrap(), &WibOptions::default()).unwrap();
        let b = model.bake(&sample_message(16, &mut rng).unwrap(), &WibOptions::default()).unwrap();
        (model, a, b)
    }

    #[test]
    fn collusion_is_idempotent_and_commutative() {
        let (_, a, b) = baked(1);
        let aa = collude_models(&a, &a).unwrap();
        assert_eq!(aa.to_checkpoint().to_bytes().unwrap(), a.to_checkpoint().to_bytes().unwrap());
        let ab = collude_models(&a, &b).unwrap().to_checkpoint().to_bytes().unwrap();
        let ba = collude_models(&b, &a).unwrap().to_checkpoint().to_bytes().unwrap();
        assert_eq!(ab, ba);
    }

    #[test]
    fn conditions_partition_positions() {
        let m0 = WatermarkMessage::parse_binary("00110101").unwrap();
        let m1 = WatermarkMessage::parse_binary("01010011").unwrap();
        let m = Model::new(&ModelConfig { d_w: 8, ..ModelConfig::default() }, 2).unwrap();
        let z = vec![m.encode(&crate::data::procedural_image(&mut Rng::new(0))).unwrap()];
        let dec = m.bake(&m0, &WibOptions::default()).unwrap();
        let r = collusion_bit_stats(&m, &dec, &m0, &m1, &z, 4, 0).unwrap();
        let labels: Vec<String> = r.conditions.iter().map(|c| serde_json::to_string(c).unwrap()).collect();
        assert_eq!(labels, ["\"00\"", "\"01\"", "\"10\"", "\"11\"", "\"00\"", "\"10\"", "\"01\"", "\"11\""]);
        assert_eq!(r.differing_histogram.iter().sum::<usize>(), 4 * 4);
    }
}
