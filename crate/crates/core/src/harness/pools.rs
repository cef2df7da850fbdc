//! Generator checkpoints and the synthetic pools drawn from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::balance::randomized_patch;
use crate::data::dataset::{load_dataset, mask_hash, write_dataset, DatasetItem, Manifest, Method, Provenance, SlideRecord};
use crate::data::patch::LabeledPatch;
use crate::data::split::{SplitMap, SplitName};
use crate::diffusion::{
    encode_latents, ldm_inpaint, ldm_sample_batch, train_autoencoder, train_ldm, tumor_region, LatentDiffusion, VqAutoencoder,
};
use crate::error::{Error, IoContext, Result};
use crate::gan::{gan_generate, train_gan, SpadeGan, StyleVector};
use crate::harness::spec::{stable_hash, ExperimentSpec, GeneratorSource};
use crate::subtype::SubtypeClass;

const SAMPLE_CHUNK: usize = 16;

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn json_digest(value: &impl Serialize) -> Result<String> {
    // `serde_json::Value` keeps object keys sorted, which makes this canonical.
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Trained (or loaded) generator networks with a digest of each checkpoint.
#[derive(Debug, Default)]
pub struct Generators {
    pub gan: Option<(SpadeGan<f32>, String)>,
    pub diffusion: Option<DiffusionPair>,
}

#[derive(Debug)]
pub struct DiffusionPair {
    pub ae: VqAutoencoder<f32>,
    pub ldm: LatentDiffusion<f32>,
    /// Covers both checkpoints.
    pub digest: String,
}

/// Returns the checkpoint to use, training into `cache_dir` when needed.
fn resolve<C: Serialize>(
    source: &GeneratorSource<C>,
    name: &str,
    cache_dir: &Path,
    key: &impl Serialize,
    train: impl FnOnce(&C, &Path) -> Result<()>,
) -> Result<PathBuf> {
    if let Some(path) = &source.checkpoint {
        return Ok(path.clone());
    }
    let config = source
        .train
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{name} needs a checkpoint or a training config")))?;
    let tag = &json_digest(&(config, key))?[..16];
    let path = cache_dir.join(format!("{name}-{tag}.ckpt"));
    if path.is_file() {
        info!("reusing cached {name} checkpoint {}", path.display());
        return Ok(path);
    }
    fs::create_dir_all(cache_dir).at(cache_dir)?;
    info!("training {name} from scratch");
    let tmp = path.with_extension("ckpt.partial");
    train(config, &tmp)?;
    fs::rename(&tmp, &path).at(&path)?;
    Ok(path)
}

/// Loads or trains every generator the spec's methods need. Trained
/// checkpoints are cached in `output/generators` keyed by config, seed and
/// dataset, so later invocations reuse them.
pub fn prepare_generators(spec: &ExperimentSpec, train: &[LabeledPatch], dataset_digest: &str) -> Result<Generators> {
    let cache = spec.output_dir.join("generators");
    let mut out = Generators::default();
    if spec.methods.contains(&Method::Gan) {
        let seed = spec.base_seed ^ stable_hash("generator:gan");
        let path = resolve(&spec.gan, "gan", &cache, &(seed, dataset_digest), |config, tmp| {
            train_gan::<f32>(train, config.clone(), seed)?.save(tmp)
        })?;
        out.gan = Some((SpadeGan::load(&path)?, file_digest(&path)?));
    }
    if spec.methods.iter().any(|m| matches!(m, Method::Diffusion | Method::Inpaint)) {
        let ae_seed = spec.base_seed ^ stable_hash("generator:autoencoder");
        let images: Vec<_> = train.iter().map(|p| p.image.clone()).collect();
        let ae_path = resolve(&spec.autoencoder, "autoencoder", &cache, &(ae_seed, dataset_digest), |config, tmp| {
            train_autoencoder::<f32>(&images, config.clone(), ae_seed)?.ae.save(tmp)
        })?;
        let ae = VqAutoencoder::load(&ae_path)?;
        let ae_digest = file_digest(&ae_path)?;

        let ldm_seed = spec.base_seed ^ stable_hash("generator:diffusion");
        let ldm_path = resolve(&spec.ldm, "diffusion", &cache, &(ldm_seed, dataset_digest, &ae_digest), |config, tmp| {
            let set = encode_latents(&ae, train)?;
            train_ldm(&set, config.clone(), &ae, ldm_seed)?.save(tmp)
        })?;
        let ldm = LatentDiffusion::load(&ldm_path)?;
        ldm.check_autoencoder(&ae)?;
        let digest = json_digest(&(&ae_digest, file_digest(&ldm_path)?))?;
        out.diffusion = Some(DiffusionPair { ae, ldm, digest });
    }
    Ok(out)
}

/// A fixed set of synthetic items made by one method.
#[derive(Debug, Clone)]
pub struct Pool {
    pub method: Method,
    pub root: PathBuf,
    /// Digest of the pool manifest.
    pub digest: String,
    pub items: Vec<DatasetItem>,
}

fn pool_slide(method: Method) -> String {
    format!("pool-{}", method.name())
}

/// Per-item seed of a pool entry.
pub fn pool_item_seed(pool_seed: u64, index: usize) -> u64 {
    pool_seed ^ stable_hash(&format!("pool-item#{index}"))
}

/// Synthesizes `size` items by `method`. Item `i` takes the instance geometry
/// of tumor source patch `i mod n`, redraws every instance's subtype uniformly
/// over the tumor classes and renders an image for the new mask.
pub fn synthesize_items(
    method: Method,
    generators: &Generators,
    sources: &[LabeledPatch],
    size: usize,
    pool_seed: u64,
) -> Result<Vec<DatasetItem>> {
    let sources: Vec<&LabeledPatch> = sources.iter().filter(|p| p.mask.pixels().iter().any(|&c| c > 0)).collect();
    if sources.is_empty() && size > 0 {
        return Err(Error::Empty("no tumor patches to take pool masks from".into()));
    }
    let slide = pool_slide(method);
    let mut templates = Vec::with_capacity(size);
    for i in 0..size {
        let seed = pool_item_seed(pool_seed, i);
        let src = sources[i % sources.len()];
        let mut patch = randomized_patch(src, &SubtypeClass::TUMOR, seed)?;
        patch.slide_id = slide.clone();
        patch.origin = (i, 0);
        let provenance = Provenance {
            method,
            source_patch: Some(src.id()),
            seed: Some(seed),
            mask_hash: Some(mask_hash(&patch.mask)),
        };
        templates.push((src, patch, provenance));
    }

    let images = match method {
        Method::Gan => {
            let (gan, _) = generators.gan.as_ref().ok_or_else(|| Error::Config("no GAN loaded".into()))?;
            templates
                .iter()
                .map(|(_, p, prov)| {
                    let style = StyleVector::from_seed(prov.seed.unwrap_or_default(), gan.config.style_dim);
                    gan_generate(gan, &p.mask, &style)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Method::Diffusion => {
            let d = diffusion(generators)?;
            let mut out = Vec::with_capacity(size);
            for chunk in templates.chunks(SAMPLE_CHUNK) {
                let requests: Vec<_> = chunk.iter().map(|(_, p, prov)| (&p.mask, prov.seed.unwrap_or_default())).collect();
                out.extend(ldm_sample_batch(&d.ldm, &d.ae, &requests)?);
            }
            out
        }
        Method::Inpaint => {
            let d = diffusion(generators)?;
            templates
                .iter()
                .map(|(src, p, prov)| {
                    let region = tumor_region(&src.instances);
                    ldm_inpaint(&d.ldm, &d.ae, &src.image, &p.mask, &region, prov.seed.unwrap_or_default())
                })
                .collect::<Result<Vec<_>>>()?
        }
        Method::Real => return Err(Error::Config("`real` is not a synthesis method".into())),
    };

    Ok(templates
        .into_iter()
        .zip(images)
        .enumerate()
        .map(|(i, ((_, mut patch, provenance), image))| {
            patch.image = image;
            DatasetItem {
                id: format!("{}-{i:05}", method.name()),
                patch,
                provenance,
            }
        })
        .collect())
}

fn diffusion(generators: &Generators) -> Result<&DiffusionPair> {
    generators
        .diffusion
        .as_ref()
        .ok_or_else(|| Error::Config("no diffusion model loaded".into()))
}

fn generator_digest(method: Method, generators: &Generators) -> Result<String> {
    match method {
        Method::Gan => Ok(generators.gan.as_ref().ok_or_else(|| Error::Config("no GAN loaded".into()))?.1.clone()),
        Method::Diffusion | Method::Inpaint => Ok(diffusion(generators)?.digest.clone()),
        Method::Real => Err(Error::Config("`real` is not a synthesis method".into())),
    }
}

/// Writes synthetic items as a dataset whose single pool slide is in the
/// train split.
pub fn write_pool(root: &Path, method: Method, items: &[DatasetItem]) -> Result<Manifest> {
    let slide = pool_slide(method);
    let slides = vec![SlideRecord {
        slide_id: slide.clone(),
        aggregate_score_bin: None,
        patches: items.iter().map(|i| i.id.clone()).collect(),
    }];
    let split: SplitMap = BTreeMap::from([(slide, SplitName::Train)]);
    write_dataset(root, items, slides, split)
}

/// Loads the pool for `method` from `output/pools`, synthesizing and writing
/// it first if absent. One pool per method serves every ratio and repetition.
pub fn prepare_pool(
    spec: &ExperimentSpec,
    method: Method,
    generators: &Generators,
    sources: &[LabeledPatch],
    size: usize,
    dataset_digest: &str,
) -> Result<Pool> {
    let pool_seed = spec.base_seed ^ stable_hash(&format!("pool:{}", method.name()));
    let key = json_digest(&(method, generator_digest(method, generators)?, size, pool_seed, dataset_digest))?;
    let root = spec.output_dir.join("pools").join(format!("{}-{}", method.name(), &key[..16]));
    if !root.join(crate::data::dataset::MANIFEST_FILE).is_file() {
        info!("synthesizing {size} {} pool items", method.name());
        let items = synthesize_items(method, generators, sources, size, pool_seed)?;
        let tmp = root.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).at(&tmp)?;
        }
        write_pool(&tmp, method, &items)?;
        fs::rename(&tmp, &root).at(&root)?;
    }
    let (_, items) = load_dataset(&root)?;
    if items.len() != size {
        return Err(Error::Validation(format!(
            "pool {} holds {} items, expected {size}",
            root.display(),
            items.len()
        )));
    }
    Ok(Pool {
        method,
        digest: file_digest(&root.join(crate::data::dataset::MANIFEST_FILE))?,
        root,
        items,
    })
}
