use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;

use pqlab::attack::{attack_batch, AttackConfig, AttackLoss, StepRule};
use pqlab::dataio::{self, LabeledDataset, SyntheticSpec, VectorFormat};
use pqlab::dpqtrain::{self, TrainConfig};
use pqlab::evalkit::{
    self, mean_pr_curve, pr_curve, rank_all, write_pr_csv, EvalData, ExperimentGrid, RelevanceJudge, TargetModel,
};
use pqlab::featnet::{self, FeatureNet};
use pqlab::kmeans::KMeansConfig;
use pqlab::numkit::{derive_seed, Rng};
use pqlab::pq::{self, Codebook, PqIndex, SearchMode};
use pqlab::softpq::SoftPqConfig;

use crate::manifest::Manifest;
use crate::{AttackArgs, Failure, GenDataArgs, QueryArgs, TrainArgs};

pub struct Context {
    pub manifest: Manifest,
    pub out: PathBuf,
}

/// A trained net with its codebooks, as loaded from disk.
struct Model {
    net: FeatureNet,
    codebooks: Vec<(usize, Codebook)>,
}

impl Context {
    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.manifest.seed, &format!("cli/{stage}"))
    }

    fn dir(&self, sub: &str) -> anyhow::Result<PathBuf> {
        let d = self.out.join(sub);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn format(&self) -> Result<VectorFormat, Failure> {
        self.manifest.data.format.parse().map_err(|e: pqlab::Error| Failure::Usage(format!("data.format: {e}")))
    }

    fn data_path(&self, which: &str) -> Result<PathBuf, Failure> {
        let configured = match which {
            "database" => &self.manifest.data.database_path,
            _ => &self.manifest.data.queries_path,
        };
        Ok(match configured {
            Some(p) => p.clone(),
            None => self.out.join("data").join(format!("{which}.{}", self.format()?.extension())),
        })
    }

    fn load_data(&self, which: &str) -> anyhow::Result<LabeledDataset> {
        load_dataset(&self.data_path(which)?)
    }

    fn model_dir(&self, name: Option<&str>) -> PathBuf {
        match name {
            None => self.out.join("model"),
            Some(n) => self.out.join("models").join(n),
        }
    }

    fn soft(&self) -> Result<SoftPqConfig, Failure> {
        let c = &self.manifest.codebook;
        SoftPqConfig::new(c.alpha, c.normalize_subvectors).map_err(|e| Failure::Usage(format!("codebook.alpha: {e}")))
    }

    fn modes(&self) -> Result<Vec<SearchMode>, Failure> {
        self.manifest
            .eval
            .modes
            .iter()
            .map(|m| m.parse().map_err(|e: pqlab::Error| Failure::Usage(format!("eval.modes: {e}"))))
            .collect()
    }

    fn load_model(&self, name: Option<&str>) -> anyhow::Result<Model> {
        let dir = self.model_dir(name);
        let net_path = dir.join("net.fnet");
        let net = featnet::load_weights(require(&net_path)?).map_err(|e| stale(&net_path, e))?;
        let mut codebooks = Vec::new();
        for m in self.manifest.all_m() {
            let p = codebook_path(&dir, m);
            let cb = pq::load_codebook(require(&p)?).map_err(|e| stale(&p, e))?;
            if cb.dim() != net.output_dim() || cb.m() != m {
                return Err(Failure::Missing(format!(
                    "{} has D={} M={}, expected D={} M={m}; re-run train",
                    p.display(),
                    cb.dim(),
                    cb.m(),
                    net.output_dim()
                ))
                .into());
            }
            codebooks.push((m, cb));
        }
        Ok(Model { net, codebooks })
    }

    fn kmeans(&self, stage: &str, m: usize) -> KMeansConfig {
        KMeansConfig::new(self.manifest.codebook.k)
            .with_seed(self.seed(&format!("{stage}/codebook/{m}")))
            .with_max_iters(self.manifest.codebook.kmeans_iters.max(1))
    }

    fn train_config(&self, stage: &str) -> TrainConfig {
        let t = &self.manifest.train;
        let c = &self.manifest.codebook;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_net: t.lr_net,
            lr_codebook: t.lr_codebook,
            alpha: c.alpha,
            seed: self.seed(&format!("{stage}/train")),
            triplets_per_epoch: t.triplets_per_epoch,
            normalize_subvectors: c.normalize_subvectors,
        }
    }

    fn attack_configs(&self, queries: &LabeledDataset, database: &LabeledDataset) -> anyhow::Result<Vec<AttackConfig>> {
        let a = &self.manifest.attack;
        let clip = match a.clip {
            Some([lo, hi]) => (lo, hi),
            None => {
                let (qlo, qhi) = queries.value_range().ok_or(Failure::Usage("query set is empty".into()))?;
                let (dlo, dhi) = database.value_range().unwrap_or((qlo, qhi));
                (qlo.min(dlo) - a.eta, qhi.max(dhi) + a.eta)
            }
        };
        let rule: StepRule =
            a.step_rule.parse().map_err(|e: pqlab::Error| Failure::Usage(format!("attack.step_rule: {e}")))?;
        a.losses
            .iter()
            .map(|l| {
                let loss: AttackLoss =
                    l.parse().map_err(|e: pqlab::Error| Failure::Usage(format!("attack.losses: {e}")))?;
                let mut cfg = AttackConfig::new(loss)
                    .with_budget(a.eta, a.iterations)
                    .with_box(clip.0, clip.1)
                    .with_random_start(a.random_start)
                    .with_seed(self.seed("attack"));
                if let Some(s) = a.step_size {
                    cfg = cfg.with_step_size(s);
                }
                cfg.step_rule = rule;
                cfg.validate().map_err(|e| Failure::Usage(format!("attack {loss}: {e}")))?;
                Ok(cfg)
            })
            .collect()
    }

    fn target(&self, name: &str, model: Model) -> TargetModel {
        TargetModel {
            name: name.into(),
            net: model.net,
            codebooks: model.codebooks.into_iter().map(|(_, c)| c).collect(),
        }
    }
}

fn codebook_path(dir: &Path, m: usize) -> PathBuf {
    dir.join(format!("codebook_m{m}.pqcb"))
}

fn index_path(out: &Path, m: usize) -> PathBuf {
    out.join("index").join(format!("index_m{m}.pqix"))
}

fn require(path: &Path) -> Result<&Path, Failure> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::Missing(format!("{} does not exist", path.display())))
    }
}

fn stale(path: &Path, e: pqlab::Error) -> anyhow::Error {
    Failure::Missing(format!("{}: {e}", path.display())).into()
}

fn load_dataset(path: &Path) -> anyhow::Result<LabeledDataset> {
    let fmt = VectorFormat::from_path(path);
    dataio::load_vectors(require(path)?, fmt).map_err(|e| stale(path, e))
}

fn check_input_dim(net: &FeatureNet, data: &LabeledDataset, what: &str) -> Result<(), Failure> {
    if data.dim() != net.input_dim() {
        return Err(Failure::Missing(format!(
            "{what} has dimension {} but the net expects {}; re-run train",
            data.dim(),
            net.input_dim()
        )));
    }
    Ok(())
}

/// Maps core numeric errors to exit code 3 with the stage name attached.
fn numeric(stage: &str) -> impl Fn(pqlab::Error) -> anyhow::Error + '_ {
    move |e| match e {
        pqlab::Error::Numeric(m) | pqlab::Error::NonFinite(m) => Failure::Numeric(format!("{stage}: {m}")).into(),
        other => anyhow::Error::new(other).context(stage.to_string()),
    }
}

pub fn gen_data(ctx: &mut Context, args: &GenDataArgs) -> anyhow::Result<()> {
    let d = &mut ctx.manifest.data;
    d.classes = args.classes.or(d.classes);
    d.per_class = args.per_class.or(d.per_class);
    d.dim = args.dim.or(d.dim);
    if let Some(v) = args.separation {
        d.separation = v;
    }
    if let Some(v) = args.sigma {
        d.sigma = v;
    }
    if let Some(v) = args.queries {
        d.queries = v;
    }
    if let Some(v) = &args.format {
        d.format = v.clone();
    }
    if args.no_stratify {
        d.stratified = false;
    }
    let missing: Vec<&str> = [("--classes", d.classes), ("--per-class", d.per_class), ("--dim", d.dim)]
        .iter()
        .filter(|(_, v)| v.is_none())
        .map(|(n, _)| *n)
        .collect();
    if !missing.is_empty() {
        use clap::CommandFactory;
        let mut cmd = crate::Cli::command();
        cmd.build();
        let sub = cmd.find_subcommand_mut("gen-data").expect("gen-data subcommand");
        sub.error(clap::error::ErrorKind::MissingRequiredArgument, format!("missing {}", missing.join(", "))).exit();
    }
    let spec = SyntheticSpec {
        classes: d.classes.unwrap(),
        per_class: d.per_class.unwrap(),
        dim: d.dim.unwrap(),
        separation: d.separation,
        sigma: d.sigma,
        seed: ctx.seed("gen-data"),
    };
    let fmt = ctx.format()?;
    let ds = dataio::generate_synthetic(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    let split = dataio::split(&ds, ctx.manifest.data.queries, ctx.seed("split"), ctx.manifest.data.stratified)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if split.has_warning() {
        eprintln!("warning: classes {:?} have no database records", split.missing_from_database);
    }
    let dir = ctx.dir("data")?;
    dataio::save_vectors(&split.database, dir.join(format!("database.{}", fmt.extension())), fmt)?;
    dataio::save_vectors(&split.queries, dir.join(format!("queries.{}", fmt.extension())), fmt)?;
    ctx.manifest.save(&ctx.out.join("manifest.toml"))?;
    eprintln!("wrote {} database and {} query records to {}", split.database.len(), split.queries.len(), dir.display());
    Ok(())
}

/// Trains a net plus its primary codebook, then fits the extra code lengths
/// on the trained features. Writes everything to `dir`.
fn train_into(ctx: &Context, stage: &str, dir: &Path, db: &LabeledDataset) -> anyhow::Result<Vec<f64>> {
    let man = &ctx.manifest;
    man.validate()?;
    let mut rng = Rng::new(ctx.seed(&format!("{stage}/net")));
    let net = FeatureNet::mlp(db.dim(), &man.net.hidden, man.net.feature_dim, &mut rng)
        .map_err(|e| Failure::Usage(format!("net: {e}")))?;
    let m = man.codebook.m;
    let cb = dpqtrain::init_codebook(&net, db.vectors(), m, man.codebook.k, &ctx.kmeans(stage, m))
        .map_err(|e| Failure::Usage(format!("codebook init: {e}")))?;
    let cfg = ctx.train_config(stage);
    let out = dpqtrain::train(db.vectors(), db.labels(), net, cb, &cfg).map_err(numeric(stage))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    featnet::save_weights(&out.net, dir.join("net.fnet"))?;
    pq::save_codebook(&out.codebook, codebook_path(dir, m))?;
    for &extra in man.all_m().iter().skip(1) {
        let cb = dpqtrain::init_codebook(&out.net, db.vectors(), extra, man.codebook.k, &ctx.kmeans(stage, extra))
            .map_err(numeric(stage))?;
        pq::save_codebook(&cb, codebook_path(dir, extra))?;
    }
    dpqtrain::write_loss_history(dir.join("loss.csv"), &out.loss_history)?;
    Ok(out.loss_history)
}

pub fn train(ctx: &mut Context, args: &TrainArgs) -> anyhow::Result<()> {
    if let Some(e) = args.epochs {
        ctx.manifest.train.epochs = e;
    }
    let db = ctx.load_data("database")?;
    let dir = ctx.model_dir(None);
    let history = train_into(ctx, "train", &dir, &db)?;
    match (history.first(), history.last()) {
        (Some(a), Some(b)) => eprintln!("trained {} epochs, loss {a:.4} -> {b:.4}", history.len()),
        _ => eprintln!("0 epochs: wrote initial artifacts"),
    }
    Ok(())
}

pub fn build_index(ctx: &Context) -> anyhow::Result<()> {
    ctx.manifest.validate()?;
    let model = ctx.load_model(None)?;
    let db = ctx.load_data("database")?;
    check_input_dim(&model.net, &db, "database")?;
    let feats = model.net.features_batch(db.vectors()).map_err(numeric("build-index"))?;
    ctx.dir("index")?;
    for (m, cb) in model.codebooks {
        let index = PqIndex::build(cb, &feats, db.ids().to_vec(), db.single_labels())?;
        pq::save_index(&index, index_path(&ctx.out, m))?;
    }
    eprintln!("indexed {} records", db.len());
    Ok(())
}

fn load_primary_index(ctx: &Context, model: &Model) -> anyhow::Result<PqIndex> {
    let m = ctx.manifest.codebook.m;
    let path = index_path(&ctx.out, m);
    let index = pq::load_index(require(&path)?).map_err(|e| stale(&path, e))?;
    let cb = &model.codebooks.iter().find(|(mm, _)| *mm == m).expect("primary codebook loaded").1;
    if index.codebook() != cb {
        return Err(Failure::Missing(format!(
            "{} was built from a different codebook; re-run build-index",
            path.display()
        ))
        .into());
    }
    Ok(index)
}

pub fn query(ctx: &Context, args: &QueryArgs) -> anyhow::Result<()> {
    ctx.manifest.validate()?;
    let model = ctx.load_model(None)?;
    let index = load_primary_index(ctx, &model)?;
    let db = ctx.load_data("database")?;
    let qpath = match &args.queries {
        Some(p) => p.clone(),
        None => ctx.data_path("queries")?,
    };
    let queries = load_dataset(&qpath)?;
    check_input_dim(&model.net, &queries, "query set")?;
    let judge = RelevanceJudge::from_dataset(&db)?;
    let feats = model.net.features_batch(queries.vectors()).map_err(numeric("query"))?;
    let top_n = args.top_n.unwrap_or(ctx.manifest.eval.top_n);
    let stem = qpath.file_stem().and_then(|s| s.to_str()).unwrap_or("queries").to_string();
    let dir = ctx.dir("query")?;
    let mut maps = csv_writer(&dir.join(format!("{stem}_map.csv")))?;
    maps.write_record(["mode", "map"])?;
    for mode in ctx.modes()? {
        let map = evalkit::mean_average_precision(&feats, queries.labels(), &index, mode, &judge)
            .map_err(numeric("query"))?;
        maps.write_record([mode.to_string(), map.to_string()])?;
        let mut w = csv_writer(&dir.join(format!("{stem}_ranking_{mode}.csv")))?;
        w.write_record(["query_id", "rank", "id", "distance"])?;
        for (qid, f) in queries.ids().iter().zip(&feats) {
            for (rank, hit) in pq::search(f, &index, top_n, mode)?.iter().enumerate() {
                w.write_record([
                    qid.to_string(),
                    (rank + 1).to_string(),
                    hit.id.to_string(),
                    hit.distance.to_string(),
                ])?;
            }
        }
        w.flush()?;
        eprintln!("{stem} {mode}: mAP {map:.4}");
    }
    maps.flush()?;
    Ok(())
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn attack(ctx: &mut Context, args: &AttackArgs) -> anyhow::Result<()> {
    let a = &mut ctx.manifest.attack;
    if !args.losses.is_empty() {
        a.losses = args.losses.clone();
    }
    if let Some(e) = args.eta {
        a.eta = e;
    }
    if let Some(i) = args.iterations {
        a.iterations = i;
    }
    ctx.manifest.validate()?;
    let model = ctx.load_model(None)?;
    let db = ctx.load_data("database")?;
    let queries = ctx.load_data("queries")?;
    check_input_dim(&model.net, &queries, "query set")?;
    let soft = ctx.soft()?;
    let cb = &model.codebooks[0].1;
    let fmt = VectorFormat::from_path(&ctx.data_path("queries")?);
    let dir = ctx.dir("attack")?;
    for cfg in ctx.attack_configs(&queries, &db)? {
        let stage = format!("attack {}", cfg.loss);
        let reports =
            attack_batch(queries.vectors(), queries.ids(), &model.net, cb, &soft, &cfg).map_err(numeric(&stage))?;
        let adv = queries.with_vectors(reports.iter().map(|r| r.adversarial.clone()).collect())?;
        dataio::save_vectors(&adv, dir.join(format!("{}.{}", cfg.loss, fmt.extension())), fmt)?;
        let mut w = csv_writer(&dir.join(format!("{}_report.csv", cfg.loss)))?;
        w.write_record(["id", "loss_init", "loss_final", "kl_to_clean", "linf_norm"])?;
        for (id, r) in queries.ids().iter().zip(&reports) {
            w.write_record([
                id.to_string(),
                r.loss_init().to_string(),
                r.loss_final().to_string(),
                r.kl_to_clean.to_string(),
                r.linf_norm.to_string(),
            ])?;
        }
        w.flush()?;
        let stats = evalkit::AttackStats::from_reports(&reports);
        eprintln!("{}: mean KL {:.4}, max linf {:.4}", cfg.loss, stats.mean_kl, stats.max_linf);
    }
    Ok(())
}

pub fn eval(ctx: &Context) -> anyhow::Result<()> {
    ctx.manifest.validate()?;
    let model = ctx.load_model(None)?;
    let db = ctx.load_data("database")?;
    let queries = ctx.load_data("queries")?;
    check_input_dim(&model.net, &queries, "query set")?;
    let soft = ctx.soft()?;
    let modes = ctx.modes()?;
    let attacks = ctx.attack_configs(&queries, &db)?;
    let primary = model.codebooks[0].1.clone();
    let target = ctx.target("primary", model);
    let mut bit_lengths: Vec<usize> = target.codebooks.iter().map(Codebook::bits).collect();
    bit_lengths.sort_unstable();
    let grid = ExperimentGrid {
        bit_lengths,
        models: vec![target.clone()],
        attacks: attacks.clone(),
        modes: modes.clone(),
        soft,
    };
    let data = EvalData { database: &db, queries: &queries };
    let cells = evalkit::whitebox_experiment(&grid, data).map_err(numeric("eval"))?;
    let dir = ctx.dir("eval")?;
    evalkit::write_whitebox_csv(dir.join("whitebox.csv"), &cells)?;

    let judge = data.judge()?;
    let feats_db = target.net.features_batch(db.vectors()).map_err(numeric("eval"))?;
    let index = PqIndex::build(primary.clone(), &feats_db, db.ids().to_vec(), db.single_labels())?;
    let mut sets = vec![("clean".to_string(), queries.vectors().to_vec())];
    for cfg in &attacks {
        let reports = attack_batch(queries.vectors(), queries.ids(), &target.net, &primary, &soft, cfg)
            .map_err(numeric("eval"))?;
        sets.push((cfg.loss.to_string(), reports.into_iter().map(|r| r.adversarial).collect()));
    }
    for (name, inputs) in &sets {
        let feats = target.net.features_batch(inputs).map_err(numeric("eval"))?;
        for &mode in &modes {
            let ranked = rank_all(&feats, &index, mode)?;
            let curves = ranked
                .iter()
                .zip(queries.labels())
                .map(|(r, l)| pr_curve(r, &judge, l, ctx.manifest.eval.pr_points))
                .collect::<pqlab::Result<Vec<_>>>()?;
            write_pr_csv(dir.join(format!("pr_{name}_{mode}.csv")), &mean_pr_curve(&curves)?)?;
        }
    }
    for c in &cells {
        eprintln!("{:>3} bits {} {:<5} mAP {:.4}", c.bits, c.mode, c.attack, c.map);
    }
    Ok(())
}

pub fn transfer_bits(ctx: &Context) -> anyhow::Result<()> {
    ctx.manifest.validate()?;
    let model = ctx.load_model(None)?;
    let db = ctx.load_data("database")?;
    let queries = ctx.load_data("queries")?;
    check_input_dim(&model.net, &queries, "query set")?;
    let target = ctx.target("primary", model);
    let available: Vec<usize> = target.codebooks.iter().map(Codebook::bits).collect();
    let t = &ctx.manifest.transfer;
    let source = t.source_bits.unwrap_or_else(|| *available.iter().min().expect("at least one codebook"));
    let mut targets = if t.target_bits.is_empty() { available.clone() } else { t.target_bits.clone() };
    targets.sort_unstable();
    targets.dedup();
    for b in std::iter::once(&source).chain(&targets) {
        if !available.contains(b) {
            return Err(Failure::Usage(format!("no {b}-bit codebook; trained code lengths are {available:?}")).into());
        }
    }
    let attack = transfer_attack(ctx, &queries, &db)?;
    let data = EvalData { database: &db, queries: &queries };
    let cells =
        evalkit::bits_transfer_experiment(source, &targets, &target, data, &attack, &ctx.soft()?, &ctx.modes()?)
            .map_err(numeric("transfer-bits"))?;
    evalkit::write_transfer_csv(ctx.dir("transfer")?.join("bits.csv"), &cells)?;
    for c in &cells {
        eprintln!("{} -> {} bits {}: clean {:.4} attacked {:.4}", c.source, c.target, c.mode, c.clean_map, c.map);
    }
    Ok(())
}

fn transfer_attack(ctx: &Context, queries: &LabeledDataset, db: &LabeledDataset) -> anyhow::Result<AttackConfig> {
    let loss: AttackLoss =
        ctx.manifest.transfer.loss.parse().map_err(|e: pqlab::Error| Failure::Usage(format!("transfer.loss: {e}")))?;
    let c = ctx.clone_with_losses(vec![loss.to_string()]);
    Ok(c.attack_configs(queries, db)?.remove(0))
}

impl Context {
    fn clone_with_losses(&self, losses: Vec<String>) -> Context {
        let mut manifest = self.manifest.clone();
        manifest.attack.losses = losses;
        Context { manifest, out: self.out.clone() }
    }
}

pub fn transfer_models(ctx: &Context) -> anyhow::Result<()> {
    ctx.manifest.validate()?;
    let db = ctx.load_data("database")?;
    let queries = ctx.load_data("queries")?;
    let entries = &ctx.manifest.transfer.models;
    if entries.len() < 2 {
        return Err(Failure::Usage("transfer.models needs at least two entries".into()).into());
    }
    let mut models = Vec::new();
    for e in entries {
        let mut sub = ctx.clone_with_losses(ctx.manifest.attack.losses.clone());
        sub.manifest.seed = e.seed;
        let stage = format!("model/{}", e.name);
        let history = train_into(&sub, &stage, &ctx.model_dir(Some(&e.name)), &db)?;
        if let (Some(a), Some(b)) = (history.first(), history.last()) {
            eprintln!("model {}: loss {a:.4} -> {b:.4}", e.name);
        }
        models.push(ctx.target(&e.name, sub.load_model(Some(&e.name))?));
    }
    let bits = models[0].codebooks[0].bits();
    let attack = transfer_attack(ctx, &queries, &db)?;
    let data = EvalData { database: &db, queries: &queries };
    let cells = evalkit::model_transfer_experiment(&models, &models, bits, data, &attack, &ctx.soft()?, &ctx.modes()?)
        .map_err(numeric("transfer-models"))?;
    evalkit::write_transfer_csv(ctx.dir("transfer")?.join("models.csv"), &cells)?;
    for c in &cells {
        eprintln!("{} -> {} {}: clean {:.4} attacked {:.4}", c.source, c.target, c.mode, c.clean_map, c.map);
    }
    Ok(())
}
