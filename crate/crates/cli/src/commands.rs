use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use cceplus::clustering::LabelCache;
use cceplus::config::ExperimentConfig;
use cceplus::data::{make_bags_with_labels, read_manifest, render_contact_sheet, write_manifest, write_png, Bag};
use cceplus::evaluation::{evaluate, export_latents, write_confusion_csv, write_roc_csv};
use cceplus::models::{Checkpoint, CnnModel, VaeModel};
use cceplus::pipeline::{
    build_bags, encode_pool, fit_clusters, load_dataset, run_table2_sweep, sweep_cells, train_cnn_stage,
    train_vae_stage, Dataset, Method,
};
use cceplus::training::{Session, CLASSIFIER_LOG_HEADER, VAE_LOG_HEADER};

const HASH_PREFIX: &str = "# config_hash\t";

pub struct SweepArgs {
    pub alpha_zero: bool,
    pub bag_sizes: Option<Vec<usize>>,
    pub cluster_counts: Option<Vec<usize>>,
    pub no_cce: bool,
    pub vae: Option<PathBuf>,
    pub jobs: usize,
}

pub struct Context {
    cfg: ExperimentConfig,
    hash: String,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

/// Reads a manifest and the config hash from its leading comment.
fn read_manifest_file(path: &Path) -> Result<(Vec<Bag>, Option<String>)> {
    let mut first = String::new();
    open(path)?.read_line(&mut first)?;
    let hash = first.trim_end().strip_prefix(HASH_PREFIX).map(str::to_owned);
    let bags = read_manifest(open(path)?, None).with_context(|| format!("reading {}", path.display()))?;
    Ok((bags, hash))
}

impl Context {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let hash = cfg.hash();
        Self { cfg, hash }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn check_hash(&self, what: &Path, found: Option<&str>, force: bool) -> Result<()> {
        if found == Some(self.hash.as_str()) {
            return Ok(());
        }
        let found = found.unwrap_or("none");
        if force {
            log::warn!("{} was produced under config {found}, using it anyway", what.display());
            return Ok(());
        }
        bail!(
            "{} was produced under config {found}, current config is {} (pass --force to use it anyway)",
            what.display(),
            self.hash
        )
    }

    fn load_checkpoint(&self, path: &Path, force: bool) -> Result<Checkpoint> {
        let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        self.check_hash(path, Some(&ckpt.config_hash), force)?;
        Ok(ckpt)
    }

    fn load_manifest(&self, path: Option<PathBuf>, force: bool) -> Result<Vec<Bag>> {
        let path = path.unwrap_or_else(|| self.path("bags.tsv"));
        let (bags, hash) = read_manifest_file(&path)?;
        self.check_hash(&path, hash.as_deref(), force)?;
        Ok(bags)
    }

    fn dataset(&self) -> Result<Dataset> {
        self.cfg.validate_paths()?;
        Ok(load_dataset(&self.cfg)?)
    }

    fn open_log(&self, name: &str, header: &str, append: bool) -> Result<File> {
        let path = self.path(name);
        if append && path.exists() {
            return Ok(fs::OpenOptions::new().append(true).open(&path)?);
        }
        let mut f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        writeln!(f, "{HASH_PREFIX}{}", self.hash)?;
        writeln!(f, "{header}")?;
        Ok(f)
    }

    pub fn gen_bags(&self) -> Result<ExitCode> {
        let data = self.dataset()?;
        let n = self.cfg.dataset.bag_size;
        let bags = build_bags(&self.cfg, &data, n)?;
        let path = self.path("bags.tsv");
        let mut w = create(&path)?;
        writeln!(w, "{HASH_PREFIX}{}", self.hash)?;
        write_manifest(&bags, &mut w)?;
        println!("manifest\t{}", path.display());
        println!("bags\t{}", bags.len());
        println!("bag_size\t{n}");
        println!("distractor_fraction\t{}", self.cfg.dataset.distractor_fraction);
        println!("config_hash\t{}", self.hash);
        eprintln!(
            "wrote {} bags of {n} instances ({}% distractors) to {}",
            bags.len(),
            self.cfg.dataset.distractor_fraction * 100.0,
            path.display()
        );
        Ok(ExitCode::SUCCESS)
    }

    pub fn train_vae(&self, resume: Option<PathBuf>, force: bool) -> Result<ExitCode> {
        let data = self.dataset()?;
        let session = match &resume {
            Some(p) => Some(Session::<VaeModel>::resume(&self.load_checkpoint(p, force)?)?),
            None => None,
        };
        let mut log = self.open_log("vae_log.tsv", VAE_LOG_HEADER, resume.is_some())?;
        let every = self.cfg.vae.checkpoint_every;
        let out = self.cfg.output_dir.clone();
        let hash = self.hash.clone();
        let (session, history) = train_vae_stage(&self.cfg, &data.pool, session, &mut |s, e| {
            let line = e.log_line();
            writeln!(log, "{line}")?;
            println!("vae_epoch\t{line}");
            if every > 0 && s.epochs_done % every == 0 {
                s.checkpoint(&hash)
                    .save(out.join(format!("vae_epoch_{:03}.ckpt", s.epochs_done)))?;
            }
            Ok(())
        })?;
        let path = self.path("vae.ckpt");
        session.checkpoint(&self.hash).save(&path)?;
        println!("checkpoint\t{}", path.display());
        if let Some(last) = history.last() {
            eprintln!("VAE epoch {}: ELBO {:.3} (reconstruction {:.3}, KL {:.3})", last.epoch, last.total, last.reconstruction, last.kl);
        }
        Ok(ExitCode::SUCCESS)
    }

    pub fn fit_clusters(&self, vae: Option<PathBuf>, manifest: Option<PathBuf>, force: bool) -> Result<ExitCode> {
        let vae_path = vae.unwrap_or_else(|| self.path("vae.ckpt"));
        let vae = self.load_checkpoint(&vae_path, force)?.vae()?;
        let bags = self.load_manifest(manifest, force)?;
        let data = self.dataset()?;
        let latents = encode_pool(&vae, &data.pool)?;
        let k = self.cfg.cluster.k;
        let seed = self.cfg.cluster_seed(self.cfg.dataset.bag_size, k);
        let (model, cache) = fit_clusters(&self.cfg, &latents, &bags, k, seed, &self.hash)?;
        let clusters_path = self.path("clusters.txt");
        model.write_to(&self.hash, create(&clusters_path)?)?;
        let labels_path = self.path("cluster_labels.tsv");
        cache.write_to(create(&labels_path)?)?;
        println!("clusters\t{}", clusters_path.display());
        println!("labels\t{}", labels_path.display());
        println!("k\t{k}");
        println!("inertia\t{}", model.inertia);
        println!("iterations\t{}", model.iterations);
        println!("cached_instances\t{}", cache.entries.len());
        eprintln!("K-means with K={k}: inertia {:.3} after {} iterations; {} instances labeled", model.inertia, model.iterations, cache.entries.len());
        Ok(ExitCode::SUCCESS)
    }

    fn load_label_cache(&self, path: &Path, force: bool) -> Result<HashMap<usize, usize>> {
        let cache = LabelCache::read_from(open(path)?).with_context(|| format!("reading {}", path.display()))?;
        self.check_hash(path, Some(&cache.config_hash), force)?;
        Ok(cache.labels())
    }

    pub fn train_cnn(
        &self,
        manifest: Option<PathBuf>,
        labels: Option<PathBuf>,
        resume: Option<PathBuf>,
        force: bool,
    ) -> Result<ExitCode> {
        let loss = self.cfg.classifier.loss_kind();
        let bags = self.load_manifest(manifest, force)?;
        let labels_path = labels.unwrap_or_else(|| self.path("cluster_labels.tsv"));
        let cluster_labels = if loss.needs_cluster_labels() {
            if !labels_path.exists() {
                bail!(
                    "configuration error: loss cce_plus needs the cluster-class cache, {} does not exist (run fit-clusters first)",
                    labels_path.display()
                );
            }
            Some(self.load_label_cache(&labels_path, force)?)
        } else {
            None
        };
        let session = match &resume {
            Some(p) => Some(Session::<CnnModel>::resume(&self.load_checkpoint(p, force)?)?),
            None => None,
        };
        let data = self.dataset()?;
        let mut log = self.open_log("cnn_log.tsv", CLASSIFIER_LOG_HEADER, resume.is_some())?;
        let every = self.cfg.classifier.checkpoint_every;
        let out = self.cfg.output_dir.clone();
        let hash = self.hash.clone();
        let seed = self.cfg.seed_for("cnn");
        let (session, history) = train_cnn_stage(
            &self.cfg,
            &data,
            &bags,
            cluster_labels.as_ref(),
            loss,
            seed,
            session,
            &mut |s, e| {
                let line = e.log_line();
                writeln!(log, "{line}")?;
                println!("cnn_epoch\t{line}");
                if every > 0 && s.epochs_done % every == 0 {
                    s.checkpoint(&hash)
                        .save(out.join(format!("cnn_epoch_{:03}.ckpt", s.epochs_done)))?;
                }
                Ok(())
            },
        )?;
        let path = self.path("cnn.ckpt");
        session.checkpoint(&self.hash).save(&path)?;
        println!("checkpoint\t{}", path.display());
        if let Some(last) = history.last() {
            eprintln!("classifier epoch {}: loss {:.4}", last.epoch, last.train_loss);
        }
        Ok(ExitCode::SUCCESS)
    }

    pub fn evaluate(&self, checkpoint: Option<PathBuf>, positive_class: usize, force: bool) -> Result<ExitCode> {
        let path = checkpoint.unwrap_or_else(|| self.path("cnn.ckpt"));
        let model = self.load_checkpoint(&path, force)?.cnn()?;
        let data = self.dataset()?;
        let report = evaluate(&model, &data.test, positive_class, &self.hash)?;
        let report_path = self.path("report.json");
        report.write_json(create(&report_path)?)?;
        write_confusion_csv(&report.confusion, create(&self.path("confusion.csv"))?)?;
        if let Some(roc) = &report.roc {
            write_roc_csv(roc, create(&self.path("roc.csv"))?)?;
        }
        println!("report\t{}", report_path.display());
        println!("accuracy\t{}", report.accuracy);
        println!("instances\t{}", report.instances);
        match report.auc {
            Some(auc) => println!("auc\t{auc}"),
            None => println!("auc\tnan"),
        }
        println!("config_hash\t{}", report.config_hash);
        eprintln!("test accuracy {:.4} on {} instances", report.accuracy, report.instances);
        Ok(ExitCode::SUCCESS)
    }

    pub fn sweep(&self, args: SweepArgs, force: bool) -> Result<ExitCode> {
        let mut cells = sweep_cells(&self.cfg, args.alpha_zero);
        if let Some(sizes) = &args.bag_sizes {
            cells.retain(|c| sizes.contains(&c.bag_size));
        }
        if let Some(ks) = &args.cluster_counts {
            cells.retain(|c| match c.method {
                Method::CcePlus { k, alpha } => ks.contains(&k) || alpha == 0.0,
                Method::Cce => true,
            });
        }
        if args.no_cce {
            cells.retain(|c| c.method != Method::Cce);
        }
        if cells.is_empty() {
            bail!("the requested filters leave no sweep cells");
        }
        let data = self.dataset()?;
        let needs_vae = cells.iter().any(|c| c.method != Method::Cce);
        let vae = match (&args.vae, needs_vae) {
            (Some(p), true) => Some(self.load_checkpoint(p, force)?.vae()?),
            (None, true) => {
                let (session, _) = train_vae_stage(&self.cfg, &data.pool, None, &mut |_, e| {
                    eprintln!("vae {}", e.log_line());
                    Ok(())
                })?;
                session.checkpoint(&self.hash).save(self.path("vae.ckpt"))?;
                Some(session.model)
            }
            (_, false) => None,
        };
        let report = run_table2_sweep(&self.cfg, &data, &cells, args.jobs, vae)?;

        let logs = self.path("sweep_logs");
        fs::create_dir_all(&logs)?;
        for c in &report.cells {
            let name = format!(
                "n{}_{}.tsv",
                c.cell.bag_size,
                match c.cell.method {
                    Method::Cce => "cce".to_owned(),
                    Method::CcePlus { k, alpha } => format!("cce_plus_k{k}_a{alpha}"),
                }
            );
            let mut w = create(&logs.join(name))?;
            writeln!(w, "{HASH_PREFIX}{}", self.hash)?;
            writeln!(w, "# seed\t{}", c.seed)?;
            writeln!(w, "{CLASSIFIER_LOG_HEADER}")?;
            for e in &c.history {
                writeln!(w, "{}", e.log_line())?;
            }
            println!(
                "cell\t{}\t{}\t{}",
                c.cell.bag_size,
                c.cell.method.label(),
                c.accuracy.map_or_else(|| "FAILED".to_owned(), |a| a.to_string())
            );
        }
        let table = self.path("sweep.csv");
        report.write_table_csv(create(&table)?)?;
        report.write_metadata_json(create(&self.path("sweep_meta.json"))?)?;
        println!("table\t{}", table.display());
        eprint!("{}", fs::read_to_string(&table)?);
        if report.all_ok() {
            Ok(ExitCode::SUCCESS)
        } else {
            eprintln!("some sweep cells failed; see sweep_meta.json");
            Ok(ExitCode::from(2))
        }
    }

    pub fn export_latents(&self, vae: Option<PathBuf>, manifest: Option<PathBuf>, force: bool) -> Result<ExitCode> {
        let vae_path = vae.unwrap_or_else(|| self.path("vae.ckpt"));
        let vae = self.load_checkpoint(&vae_path, force)?.vae()?;
        let data = self.dataset()?;
        let (ids, weak): (Vec<usize>, Vec<Option<usize>>) = match manifest {
            Some(p) => {
                let bags = self.load_manifest(Some(p), force)?;
                let mut seen = HashMap::new();
                let mut order = Vec::new();
                for bag in &bags {
                    for &id in &bag.instance_ids {
                        seen.entry(id).or_insert_with(|| {
                            order.push(id);
                            bag.bag_label
                        });
                    }
                }
                let weak = order.iter().map(|id| Some(seen[id])).collect();
                (order, weak)
            }
            None => ((0..data.pool.len()).collect(), vec![None; data.pool.len()]),
        };
        let instances = ids.iter().map(|&id| data.pool.get(id)).collect::<cceplus::Result<Vec<_>>>()?;
        let path = self.path("latents.csv");
        let rows = export_latents(&vae, &instances, &weak, create(&path)?)?;
        println!("latents\t{}", path.display());
        println!("rows\t{rows}");
        eprintln!("exported {rows} latent vectors of dimension {}", vae.arch.latent);
        Ok(ExitCode::SUCCESS)
    }

    pub fn render_bags(&self, bag_size: usize, labels: &[usize]) -> Result<ExitCode> {
        let data = self.dataset()?;
        let spec = self.cfg.bag_spec(bag_size, data.pool.len());
        let bags = make_bags_with_labels(&data.pool.instances, &spec, labels)?;
        let sheet = render_contact_sheet(&data.pool, &bags)?;
        let path = self.path("bags_sample.png");
        write_png(&sheet, &path)?;
        println!("contact_sheet\t{}", path.display());
        println!("bags\t{}", bags.len());
        eprintln!("rendered {} bags of {bag_size} to {}", bags.len(), path.display());
        Ok(ExitCode::SUCCESS)
    }
}
