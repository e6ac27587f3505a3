//! Config-driven pipeline stages and the bag-size × method accuracy sweep.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit_best_of, ClusterModel, LabelCache, LabeledPoint};
use crate::config::{derive_seed, DatasetKind, ExperimentConfig};
use crate::data::{
    load_mnist, make_bags, read_rgb_png, sample_patches, stack, tissue_mask, Bag, ImageInstance,
    InstancePool,
};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_accuracy;
use crate::losses::LossKind;
use crate::models::{CnnModel, VaeModel};
use crate::training::{
    train_classifier_session, train_vae_session, examples_from_bags, ClassifierEpoch, EpochHook,
    Session, VaeEpoch,
};

const ENCODE_BATCH: usize = 256;

/// Training pool and held-out test instances.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub pool: InstancePool,
    pub test: Vec<ImageInstance>,
    /// Slide datasets come with one fixed bag per training slide.
    pub slide_bags: Option<Vec<Bag>>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset.kind {
        DatasetKind::Mnist => {
            let split = load_mnist(&cfg.dataset.data_root)?;
            let mut train = split.train;
            let mut test = split.test;
            if let Some(n) = cfg.dataset.train_limit {
                train.truncate(n);
            }
            if let Some(n) = cfg.dataset.test_limit {
                test.truncate(n);
            }
            Ok(Dataset {
                pool: InstancePool::new(cfg.input_shape(), train)?,
                test,
                slide_bags: None,
            })
        }
        DatasetKind::Slides => load_slides(cfg),
    }
}

/// Extracts tissue patches from every slide listed in the labels file. Each training slide
/// becomes one bag; test patches inherit their slide's label as ground truth.
fn load_slides(cfg: &ExperimentConfig) -> Result<Dataset> {
    let root = &cfg.dataset.data_root;
    let s = &cfg.dataset.slides;
    let labels_path = root.join(&s.labels_file);
    let file = std::fs::File::open(&labels_path).map_err(|e| Error::Ingest {
        path: labels_path.clone(),
        message: e.to_string(),
    })?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut bags = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Ingest {
            path: labels_path.clone(),
            message: format!("line {}: {m}", n + 1),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, label, split] = cols[..] else {
            return Err(bad("expected file, label and split columns"));
        };
        let label: usize = label.parse().map_err(|_| bad("bad label"))?;
        if label >= cfg.dataset.num_classes {
            return Err(Error::LabelRange {
                label,
                classes: cfg.dataset.num_classes,
            });
        }
        let slide = read_rgb_png(root.join(name), 0)?;
        let mask = tissue_mask(&slide, &s.tissue())?;
        let seed = cfg.seed_for(&format!("patches;{name}"));
        let patches = sample_patches(&slide, &mask, s.patches_per_slide, s.patch_size, seed)?;
        match split {
            "train" => {
                let start = train.len();
                for (i, mut p) in patches.into_iter().enumerate() {
                    p.id = start + i;
                    train.push(p);
                }
                bags.push(Bag {
                    instance_ids: (start..train.len()).collect(),
                    bag_label: label,
                    matching_count: 0,
                });
            }
            "test" => {
                let start = test.len();
                for (i, mut p) in patches.into_iter().enumerate() {
                    p.id = start + i;
                    p.true_label = Some(label);
                    test.push(p);
                }
            }
            _ => return Err(bad("split must be train or test")),
        }
    }
    Ok(Dataset {
        pool: InstancePool::new(cfg.input_shape(), train)?,
        test,
        slide_bags: Some(bags),
    })
}

pub fn build_bags(cfg: &ExperimentConfig, data: &Dataset, bag_size: usize) -> Result<Vec<Bag>> {
    match &data.slide_bags {
        Some(bags) => Ok(bags.clone()),
        None => make_bags(&data.pool.instances, &cfg.bag_spec(bag_size, data.pool.len())),
    }
}

/// Trains the VAE on the whole pool (or continues `resume`).
pub fn train_vae_stage(
    cfg: &ExperimentConfig,
    pool: &InstancePool,
    resume: Option<Session<VaeModel>>,
    on_epoch: EpochHook<'_, VaeModel, VaeEpoch>,
) -> Result<(Session<VaeModel>, Vec<VaeEpoch>)> {
    let spec = cfg.vae_run_spec();
    let mut session = match resume {
        Some(s) => s,
        None => Session::new(
            VaeModel::new(cfg.vae_arch(), derive_seed(spec.seed, "init"))?,
            &spec,
            pool.len(),
        )?,
    };
    let history = train_vae_session(pool, &mut session, &spec, on_epoch)?;
    Ok((session, history))
}

/// Posterior means of every pool instance, indexed by id.
pub fn encode_pool(vae: &VaeModel, pool: &InstancePool) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(pool.len());
    for chunk in pool.instances.chunks(ENCODE_BATCH) {
        let refs: Vec<&ImageInstance> = chunk.iter().collect();
        out.extend(vae.encode_means(&stack(pool.shape, &refs)?)?);
    }
    Ok(out)
}

/// One labeled point per bag slot.
pub fn cluster_points(latents: &[Vec<f64>], bags: &[Bag]) -> Result<Vec<LabeledPoint>> {
    let mut points = Vec::new();
    for bag in bags {
        for &id in &bag.instance_ids {
            let feature = latents
                .get(id)
                .ok_or_else(|| Error::Parameter(format!("no latent for instance {id}")))?;
            points.push(LabeledPoint {
                feature: feature.clone(),
                weak_label: bag.bag_label,
            });
        }
    }
    Ok(points)
}

/// Fits K-means on bag-slot latents and caches the cluster and cluster-class of every
/// distinct bag instance.
pub fn fit_clusters(
    cfg: &ExperimentConfig,
    latents: &[Vec<f64>],
    bags: &[Bag],
    k: usize,
    seed: u64,
    config_hash: &str,
) -> Result<(ClusterModel, LabelCache)> {
    let points = cluster_points(latents, bags)?;
    let c = &cfg.cluster;
    let model = kmeans_fit_best_of(&points, k, seed, c.max_iters, c.tol, c.restarts)?;
    let ids: BTreeSet<usize> = bags.iter().flat_map(|b| b.instance_ids.iter().copied()).collect();
    let entries = ids
        .into_iter()
        .map(|id| {
            let (cluster, class) = model.assign(&latents[id])?;
            Ok((id, cluster, class))
        })
        .collect::<Result<_>>()?;
    Ok((
        model,
        LabelCache {
            config_hash: config_hash.to_owned(),
            entries,
        },
    ))
}

/// Trains a fresh classifier on `bags`, seeded from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_cnn_stage(
    cfg: &ExperimentConfig,
    data: &Dataset,
    bags: &[Bag],
    cluster_labels: Option<&HashMap<usize, usize>>,
    loss: LossKind,
    seed: u64,
    resume: Option<Session<CnnModel>>,
    on_epoch: EpochHook<'_, CnnModel, ClassifierEpoch>,
) -> Result<(Session<CnnModel>, Vec<ClassifierEpoch>)> {
    let spec = cfg.classifier_run_spec(loss, seed);
    let examples = examples_from_bags(bags, cluster_labels, loss)?;
    let mut session = match resume {
        Some(s) => s,
        None => Session::new(
            CnnModel::new(cfg.cnn_arch(), derive_seed(spec.seed, "init"))?,
            &spec,
            examples.len(),
        )?,
    };
    let test = cfg.classifier.eval_each_epoch.then_some(data.test.as_slice());
    let history = train_classifier_session(&data.pool, &examples, test, &mut session, &spec, on_epoch)?;
    Ok((session, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum Method {
    Cce,
    CcePlus { k: usize, alpha: f64 },
}

impl Method {
    pub fn label(&self) -> String {
        match *self {
            Method::Cce => "CCE".into(),
            Method::CcePlus { k, alpha } if alpha == 0.5 => format!("CCE+ (K={k})"),
            Method::CcePlus { k, alpha } => format!("CCE+ (K={k} alpha={alpha})"),
        }
    }

    pub fn loss(&self) -> LossKind {
        match *self {
            Method::Cce => LossKind::Cce,
            Method::CcePlus { alpha, .. } => LossKind::CcePlus { alpha },
        }
    }

    fn descriptor(&self) -> String {
        match *self {
            Method::Cce => "cce".into(),
            Method::CcePlus { k, alpha } => format!("cce_plus;k={k};alpha={alpha}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub bag_size: usize,
    pub method: Method,
}

impl SweepCell {
    pub fn seed(&self, cfg: &ExperimentConfig) -> u64 {
        cfg.seed_for(&format!("cell;n={};{}", self.bag_size, self.method.descriptor()))
    }
}

/// The configured grid in table order (method-major), optionally followed by the
/// alpha = 0 ablation cell.
pub fn sweep_cells(cfg: &ExperimentConfig, alpha_zero: bool) -> Vec<SweepCell> {
    let s = &cfg.sweep;
    let mut methods = Vec::new();
    if s.include_cce {
        methods.push(Method::Cce);
    }
    methods.extend(s.cluster_counts.iter().map(|&k| Method::CcePlus {
        k,
        alpha: cfg.classifier.alpha,
    }));
    let mut cells: Vec<SweepCell> = methods
        .iter()
        .flat_map(|&method| s.bag_sizes.iter().map(move |&bag_size| SweepCell { bag_size, method }))
        .collect();
    if alpha_zero {
        cells.push(SweepCell {
            bag_size: s.alpha_zero_bag_size,
            method: Method::CcePlus {
                k: s.alpha_zero_k,
                alpha: 0.0,
            },
        });
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: SweepCell,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub history: Vec<ClassifierEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub vae_seed: u64,
    pub vae_epochs: usize,
    pub classifier_epochs: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub cells: Vec<CellOutcome>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl SweepReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.error.is_none())
    }

    pub fn accuracy(&self, bag_size: usize, method: Method) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.cell.bag_size == bag_size && c.cell.method == method)
            .and_then(|c| c.accuracy)
    }

    /// Methods as rows and bag sizes as columns. Failed cells read `FAILED`; cells outside
    /// the requested grid are empty.
    pub fn write_table_csv(&self, mut w: impl Write) -> Result<()> {
        let mut sizes: Vec<usize> = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !sizes.contains(&c.cell.bag_size) {
                sizes.push(c.cell.bag_size);
            }
            if !methods.contains(&c.cell.method) {
                methods.push(c.cell.method);
            }
        }
        sizes.sort_unstable();
        let mut s = String::from("method");
        for n in &sizes {
            s.push_str(&format!(",{n}"));
        }
        s.push('\n');
        for m in &methods {
            s.push_str(&m.label());
            for &n in &sizes {
                let cell = self.cells.iter().find(|c| c.cell.bag_size == n && c.cell.method == *m);
                s.push(',');
                match cell {
                    Some(CellOutcome { accuracy: Some(a), .. }) => s.push_str(&format!("{a:.4}")),
                    Some(_) => s.push_str("FAILED"),
                    None => {}
                }
            }
            s.push('\n');
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn write_metadata_json(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| Error::format("sweep metadata", e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Runs every cell against a shared VAE (trained here unless supplied). Cell failures are
/// recorded in the report rather than aborting the sweep. `jobs > 1` runs cells on that
/// many threads; results do not depend on scheduling.
pub fn run_table2_sweep(
    cfg: &ExperimentConfig,
    data: &Dataset,
    cells: &[SweepCell],
    jobs: usize,
    vae: Option<VaeModel>,
) -> Result<SweepReport> {
    let started_unix = unix_now();
    let config_hash = cfg.hash();
    let needs_vae = cells.iter().any(|c| matches!(c.method, Method::CcePlus { .. }));
    let latents = if needs_vae {
        let vae = match vae {
            Some(v) => v,
            None => train_vae_stage(cfg, &data.pool, None, &mut |_, _| Ok(()))?.0.model,
        };
        Some(encode_pool(&vae, &data.pool)?)
    } else {
        None
    };

    let mut bags: HashMap<usize, std::result::Result<Vec<Bag>, String>> = HashMap::new();
    for c in cells {
        bags.entry(c.bag_size)
            .or_insert_with(|| build_bags(cfg, data, c.bag_size).map_err(|e| e.to_string()));
    }
    type Labels = std::result::Result<HashMap<usize, usize>, String>;
    let mut labels: HashMap<(usize, usize), Labels> = HashMap::new();
    for c in cells {
        if let Method::CcePlus { k, .. } = c.method {
            labels.entry((c.bag_size, k)).or_insert_with(|| {
                let b = bags[&c.bag_size].as_ref().map_err(Clone::clone)?;
                let latents = latents.as_ref().expect("VAE trained for CCE+ cells");
                let seed = cfg.cluster_seed(c.bag_size, k);
                fit_clusters(cfg, latents, b, k, seed, &config_hash)
                    .map(|(_, cache)| cache.labels())
                    .map_err(|e| e.to_string())
            });
        }
    }

    let run_cell = |cell: &SweepCell| -> CellOutcome {
        let seed = cell.seed(cfg);
        let started = Instant::now();
        let result = (|| -> std::result::Result<(f64, Vec<ClassifierEpoch>), String> {
            let b = bags[&cell.bag_size].as_ref().map_err(Clone::clone)?;
            let l = match cell.method {
                Method::Cce => None,
                Method::CcePlus { k, .. } => Some(labels[&(cell.bag_size, k)].as_ref().map_err(Clone::clone)?),
            };
            let (session, history) =
                train_cnn_stage(cfg, data, b, l, cell.method.loss(), seed, None, &mut |_, _| Ok(()))
                    .map_err(|e| e.to_string())?;
            let acc = evaluate_accuracy(&session.model, &data.test).map_err(|e| e.to_string())?;
            Ok((acc, history))
        })();
        let wall_seconds = started.elapsed().as_secs_f64();
        match result {
            Ok((acc, history)) => {
                log::info!("cell N={} {}: accuracy {acc:.4}", cell.bag_size, cell.method.label());
                CellOutcome { cell: *cell, seed, accuracy: Some(acc), error: None, wall_seconds, history }
            }
            Err(e) => {
                log::warn!("cell N={} {} failed: {e}", cell.bag_size, cell.method.label());
                CellOutcome { cell: *cell, seed, accuracy: None, error: Some(e), wall_seconds, history: Vec::new() }
            }
        }
    };

    let outcomes: Vec<CellOutcome> = if jobs <= 1 {
        cells.iter().map(run_cell).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; cells.len()]);
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let outcome = run_cell(&cells[i]);
                    slots.lock().expect("no poisoned lock")[i] = Some(outcome);
                });
            }
        });
        slots
            .into_inner()
            .expect("no poisoned lock")
            .into_iter()
            .map(|o| o.expect("every cell ran"))
            .collect()
    };

    Ok(SweepReport {
        config_hash,
        master_seed: cfg.master_seed,
        vae_seed: cfg.vae_seed(),
        vae_epochs: cfg.vae.epochs,
        classifier_epochs: cfg.classifier.epochs,
        started_unix,
        finished_unix: unix_now(),
        cells: outcomes,
    })
}
