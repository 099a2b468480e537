//! Synthetic heterogeneous clients: smooth blob phantoms seen through
//! site-specific contrast, sampling mask and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::federation::{derive_seed, ClientShard};
use crate::mri::{make_mask, undersample, Image, SamplingMask};

use super::config::{ExperimentConfig, Protocol};

// Stream tags keep the seeds of different data products apart.
const TAG_IMAGES: usize = 1;
const TAG_MASK: usize = 2;
const TAG_NOISE: usize = 3;
const SOURCE_SITE: usize = usize::MAX;

/// Sum of `blobs` isotropic Gaussians, rescaled to `[0, 1]`.
pub fn blob_phantom(size: usize, blobs: usize, rng: &mut impl Rng) -> Result<Image> {
    let s = size as f64;
    let params: Vec<(f64, f64, f64, f64)> = (0..blobs)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(s / 10.0..s / 4.0),
                rng.random_range(0.4..1.0),
            )
        })
        .collect();
    let raw = Image::from_fn(size, size, |r, c| {
        params
            .iter()
            .map(|&(cr, cc, sigma, amp)| {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                amp * (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum()
    })?;
    let (lo, hi) = (raw.min(), raw.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    raw.map(|v| (v - lo) / span)
}

/// `(train, test)` sizes of a `fraction` split of `n ≥ 2` samples; both
/// sides keep at least one sample.
pub fn split_sizes(n: usize, fraction: f64) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "a client needs at least two samples, got {n}"
        )));
    }
    let train = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    Ok((train, n - train))
}

/// Sample `i` of `site` is acquired with `acquisition(i)`.
fn site_pairs(
    config: &ExperimentConfig,
    site: usize,
    count: usize,
    acquisition: impl Fn(usize) -> Result<(Protocol, SamplingMask)>,
) -> Result<Vec<(Image, Image)>> {
    let seed = config.data.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_IMAGES, site));
    (0..count)
        .map(|i| {
            let (protocol, mask) = acquisition(i)?;
            let phantom = blob_phantom(config.model.image_size, config.data.blobs, &mut rng)?;
            let y = phantom.map(|v| protocol.gain * v + protocol.offset)?;
            let noise_seed = derive_seed(derive_seed(seed, TAG_NOISE, site), 0, i);
            let x = undersample(&y, &mask, protocol.noise_std, noise_seed)?;
            Ok((x, y))
        })
        .collect()
}

fn mask_for(config: &ExperimentConfig, protocol: &Protocol, seed: u64) -> Result<SamplingMask> {
    make_mask(
        config.model.image_size,
        protocol.acceleration,
        config.data.center_fraction,
        seed,
    )
}

fn shard(config: &ExperimentConfig, site: usize, protocol: &Protocol) -> Result<ClientShard> {
    let n = config.data.samples_per_client;
    let (train, _) = split_sizes(n, config.data.train_fraction)?;
    let mask = mask_for(
        config,
        protocol,
        derive_seed(config.data.seed, TAG_MASK, site),
    )?;
    let mut pairs = site_pairs(config, site, n, |_| Ok((*protocol, mask.clone())))?;
    let test_pairs = pairs.split_off(train);
    Ok(ClientShard {
        id: site,
        train_pairs: pairs,
        test_pairs,
        mask,
        noise_std: protocol.noise_std,
        contrast: (protocol.gain, protocol.offset),
        seed: derive_seed(config.data.seed, TAG_IMAGES, site),
    })
}

/// Clients `0..K` and the out-of-federation shard (id `K`).
pub fn synth_clients(config: &ExperimentConfig) -> Result<(Vec<ClientShard>, ClientShard)> {
    let d = &config.data;
    if d.clients == 0 || d.protocols.is_empty() {
        return Err(Error::invalid("at least one client and protocol required"));
    }
    let clients = (0..d.clients)
        .map(|k| shard(config, k, &d.protocols[k % d.protocols.len()]))
        .collect::<Result<Vec<_>>>()?;
    let held_out = shard(config, d.clients, &d.held_out)?;
    Ok((clients, held_out))
}

/// Pooled pretraining set: sample `i` uses source protocol `i mod len` and a
/// mask of its own.
pub fn source_set(config: &ExperimentConfig) -> Result<Vec<(Image, Image)>> {
    let sources = &config.data.sources;
    if sources.is_empty() {
        return Err(Error::invalid("at least one source protocol required"));
    }
    let mask_seeds = derive_seed(config.data.seed, TAG_MASK, SOURCE_SITE);
    site_pairs(config, SOURCE_SITE, config.model.pretrain_samples, |i| {
        let p = sources[i % sources.len()];
        Ok((p, mask_for(config, &p, derive_seed(mask_seeds, 0, i))?))
    })
}
