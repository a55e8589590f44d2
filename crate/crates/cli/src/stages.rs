use crate::config::{HostSection, RunConfig, SpliceSection};
use crate::report;
use crate::{CliError, Common};
use dgmr_core::artifact_store::{self as store, CurveLog, Entries, Split, Term};
use dgmr_core::gmvae::{self, GmvaeConfig, GmvaeModel, NoiseMode};
use dgmr_core::hosts::idx::{surrogate, ImageSet, SurrogateSpec};
use dgmr_core::hosts::mlp::{MlpClassifier, MlpData};
use dgmr_core::hosts::seq2seq::{PairData, Seq2seq, Seq2seqConfig};
use dgmr_core::hosts::transformer::{MlmData, TinyTransformer, TransformerConfig};
use dgmr_core::hosts::{no_hooks, AnyHost, Host, HostKind, NoHook};
use dgmr_core::pipeline::{self, TextEval};
use dgmr_core::splice::{self, SpliceSite, SplicedHost, StochasticLayer};
use dgmr_core::textdata::{parse_corpus, load_corpus, MaskContext, MaskPolicy, MaskedCorpus, PolicyKind, Vocab};
use dgmr_core::CoreError;
use dgmr_tensor::{OptimizerState, Rng};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::sync::Arc;

type R<T> = std::result::Result<T, CliError>;

// Rng streams derived from the data seed, one per stage.
const S_SPLIT: u64 = 1;
const S_MASK: u64 = 2;
const S_PRETRAIN: u64 = 3;
const S_DGM: u64 = 4;
const S_SPLICE: u64 = 5;
const S_BASELINE: u64 = 6;
const S_DROPOUT: u64 = 7;
const S_EVAL: u64 = 8;
const S_PAIRS: u64 = 9;

const SPLICE_ENTRY: &str = "__splice__";
const DGM_PREFIX: &str = "dgm/";
const EVAL_BATCH: usize = 64;

struct Run {
    cfg: RunConfig,
    args: Common,
}

/// How a checkpoint's host is wrapped at its site.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpliceHeader {
    site: String,
    variant: splice::DgmVariant,
    layer: String,
    rate: Option<f32>,
    noise_mode: NoiseMode,
}

struct Loaded {
    host: AnyHost,
    site: SpliceSite,
    layer: StochasticLayer,
    noise: NoiseMode,
}

fn write(path: &Path, text: &str) -> R<()> {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e).into())
}

fn read(path: &Path) -> R<String> {
    std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e).into())
}

fn to_json<T: Serialize>(v: &T) -> R<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CoreError::Format(e.to_string()).into())
}

impl Run {
    fn new(args: &Common) -> R<Self> {
        let mut cfg = RunConfig::load(&args.config)?;
        if let Some(s) = args.seed {
            cfg.data.seed = s;
        }
        if let Some(p) = &args.policy {
            cfg.data.policy = p.clone();
        }
        cfg.data.policy.parse::<PolicyKind>()?;
        if let Some(site) = &args.site {
            match &mut cfg.splice {
                Some(s) => s.site = site.clone(),
                None => {
                    cfg.splice = Some(SpliceSection {
                        site: site.clone(),
                        noise_mode: NoiseMode::Sample,
                        snapshot_limit: None,
                        dropout_rate: 0.5,
                    })
                }
            }
        }
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CoreError::io(&cfg.out_dir, e))?;
        Ok(Self {
            cfg,
            args: args.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn need(&self, name: &str, stage: &'static str) -> R<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Missing { path: p, stage })
        }
    }

    fn rng(&self, stream: u64) -> Rng {
        Rng::derive(self.cfg.data.seed, stream)
    }

    fn kind(&self) -> HostKind {
        match self.cfg.host {
            HostSection::Mlp { .. } => HostKind::Mlp,
            HostSection::Transformer { .. } => HostKind::Transformer,
            HostSection::Seq2seq { .. } => HostKind::Seq2seq,
        }
    }

    fn site(&self) -> R<SpliceSite> {
        let s = self.cfg.splice()?;
        let mut site = SpliceSite::parse(&s.site)?;
        if let Some(v) = self.cfg.dgm.as_ref().and_then(|d| d.variant) {
            site = SpliceSite::new(site.location, v)?;
        }
        if site.host_kind() != self.kind() {
            return Err(CoreError::Site(format!("site {} does not belong to a {} host", site.location, self.kind())).into());
        }
        Ok(site)
    }

    fn policy(&self) -> R<MaskPolicy> {
        Ok(MaskPolicy::for_kind(self.cfg.data.policy.parse()?))
    }

    fn masked_name(&self) -> String {
        format!("masked_val_{}.tsv", self.cfg.data.policy)
    }

    fn max_len(&self) -> usize {
        match self.cfg.host {
            HostSection::Transformer { max_len, .. } | HostSection::Seq2seq { max_len, .. } => max_len,
            HostSection::Mlp { .. } => usize::MAX,
        }
    }

    fn finetune_epochs(&self) -> usize {
        self.args.epochs.unwrap_or_else(|| self.cfg.finetune_epochs())
    }

    fn optimizer(&self, lr: f32) -> OptimizerState {
        match self.kind() {
            HostKind::Mlp => OptimizerState::sgd(lr),
            _ => OptimizerState::adam(lr),
        }
    }

    // ---- text ----

    fn load_text(&self) -> R<(Vocab, Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let vocab = Vocab::from_text(&read(&self.need("vocab.txt", "prepare-data")?)?)?;
        let enc = |name: &str| -> R<Vec<Vec<usize>>> {
            let text = read(&self.need(name, "prepare-data")?)?;
            Ok(parse_corpus(&text).iter().map(|s| vocab.encode(s)).collect())
        };
        let (train, val) = (enc("train.txt")?, enc("val.txt")?);
        Ok((vocab, train, val))
    }

    fn load_masked(&self, vocab: &Vocab) -> R<MaskedCorpus> {
        let text = read(&self.need(&self.masked_name(), "prepare-data")?)?;
        Ok(MaskedCorpus::parse_tsv(&text, vocab, self.policy()?, self.cfg.data.seed)?)
    }

    fn mlm_data(&self, sentences: Vec<Vec<usize>>, stream: u64) -> R<MlmData> {
        let t = &self.cfg.train;
        Ok(MlmData::new(sentences, t.batch_size, t.mask_prob, Rng::derive(self.cfg.data.seed, stream).next_u64())?)
    }

    /// Denoising pairs with per-token masking at `mask_prob`.
    fn pair_data(&self, vocab: &Vocab, sentences: &[Vec<usize>], stream: u64) -> R<PairData> {
        let policy = MaskPolicy {
            kind: PolicyKind::Medium,
            prob: self.cfg.train.mask_prob,
            cascade: vec![],
        };
        let seed = Rng::derive(self.cfg.data.seed, S_PAIRS + stream).next_u64();
        Ok(pipeline::denoising_pairs(
            sentences,
            &policy,
            &MaskContext::new(vocab),
            seed,
            self.cfg.train.batch_size,
        )?)
    }

    // ---- images ----

    fn image_files(split: &str) -> (String, String) {
        (format!("{split}-images.idx"), format!("{split}-labels.idx"))
    }

    fn load_images(&self, split: &str) -> R<MlpData> {
        let (i, l) = Self::image_files(split);
        let set = ImageSet::load(self.need(&i, "prepare-data")?, self.need(&l, "prepare-data")?)?;
        let idx: Vec<usize> = (0..set.len()).collect();
        let (x, y) = set.tensor(&idx)?;
        Ok(MlpData::new(x, y, self.cfg.train.batch_size)?)
    }

    // ---- checkpoints ----

    fn load_host(&self, name: &str, stage: &'static str) -> R<AnyHost> {
        let entries = store::load_archive(self.need(name, stage)?)?;
        let host = AnyHost::from_entries(&entries)?;
        if host.kind() != self.kind() {
            return Err(CoreError::Config(format!("{name} holds a {} host, config says {}", host.kind(), self.kind())).into());
        }
        Ok(host)
    }

    fn load_wrapped(&self, name: &str, stage: &'static str) -> R<Loaded> {
        let entries = store::load_archive(self.need(name, stage)?)?;
        let host = AnyHost::from_entries(&entries)?;
        let t = store::find(&entries, SPLICE_ENTRY)
            .ok_or_else(|| CoreError::Format(format!("{name} has no {SPLICE_ENTRY} entry")))?;
        let h: SpliceHeader = serde_json::from_str(&store::entry_text(t)?)
            .map_err(|e| CoreError::Format(format!("{SPLICE_ENTRY}: {e}")))?;
        let site = SpliceSite::new(h.site.parse()?, h.variant)?;
        let layer = match h.layer.as_str() {
            "identity" => StochasticLayer::Identity,
            "dropout" => StochasticLayer::Dropout(h.rate.unwrap_or(0.0)),
            "dgm" => {
                let sub: Entries = entries
                    .iter()
                    .filter_map(|(n, t)| n.strip_prefix(DGM_PREFIX).map(|s| (s.to_string(), t.clone())))
                    .collect();
                StochasticLayer::Dgm(Arc::new(GmvaeModel::from_entries(&sub)?))
            }
            other => return Err(CoreError::Format(format!("unknown layer kind {other:?}")).into()),
        };
        Ok(Loaded {
            host,
            site,
            layer,
            noise: h.noise_mode,
        })
    }
}

fn save_wrapped(path: &Path, host: AnyHost, site: &SpliceSite, layer: &StochasticLayer, noise: NoiseMode) -> R<()> {
    let (kind, rate) = match layer {
        StochasticLayer::Identity => ("identity", None),
        StochasticLayer::Dropout(r) => ("dropout", Some(*r)),
        StochasticLayer::Dgm(_) => ("dgm", None),
    };
    let header = SpliceHeader {
        site: site.location.to_string(),
        variant: site.variant,
        layer: kind.into(),
        rate,
        noise_mode: noise,
    };
    let mut entries = host.to_entries()?;
    entries.push(store::text_entry(
        SPLICE_ENTRY,
        &serde_json::to_string(&header).map_err(|e| CoreError::Format(e.to_string()))?,
    ));
    if let StochasticLayer::Dgm(m) = layer {
        entries.extend(m.to_entries()?.into_iter().map(|(n, t)| (format!("{DGM_PREFIX}{n}"), t)));
    }
    store::save_archive(&entries, path)?;
    Ok(())
}

// ---------------------------------------------------------------- prepare

pub fn prepare_data(args: &Common) -> R<()> {
    let run = Run::new(args)?;
    let d = &run.cfg.data;
    if run.kind() == HostKind::Mlp {
        let (train, val) = match (&d.images_path, &d.labels_path, &d.surrogate) {
            (Some(i), Some(l), _) => {
                let set = ImageSet::load(i, l)?;
                let (tr, va) = splice::split_indices(set.len(), d.val_fraction, run.rng(S_SPLIT).next_u64());
                (subset(&set, &tr), subset(&set, &va))
            }
            (None, None, Some(s)) => {
                let spec = SurrogateSpec {
                    label_noise: s.label_noise,
                    confusion: s.confusion,
                    pixel_noise: s.pixel_noise,
                    ..SurrogateSpec::default()
                };
                let all = surrogate(&spec, s.train + s.val, d.seed);
                let idx: Vec<usize> = (0..all.len()).collect();
                (subset(&all, &idx[..s.train]), subset(&all, &idx[s.train..]))
            }
            _ => {
                return Err(CoreError::Config(
                    "mlp data needs both images_path and labels_path, or a surrogate section".into(),
                )
                .into())
            }
        };
        for (split, set) in [("train", &train), ("val", &val)] {
            let (i, l) = Run::image_files(split);
            set.save(run.path(&i), run.path(&l))?;
        }
        write(
            &run.path("prepare.json"),
            &to_json(&json!({"train": train.len(), "val": val.len()}))?,
        )?;
        return Ok(());
    }
    let corpus_path = d
        .corpus_path
        .as_ref()
        .ok_or_else(|| CoreError::Config("text hosts need data.corpus_path".into()))?;
    let corpus = load_corpus(corpus_path)?;
    let td = pipeline::prepare_text(&corpus, d.min_freq, d.val_fraction, run.rng(S_SPLIT).next_u64(), run.max_len())?;
    let lines = |s: &[Vec<usize>]| -> String {
        s.iter().map(|ids| td.vocab.decode(ids).join(" ") + "\n").collect()
    };
    write(&run.path("vocab.txt"), &td.vocab.to_text())?;
    write(&run.path("train.txt"), &lines(&td.train))?;
    write(&run.path("val.txt"), &lines(&td.val))?;
    let mc = MaskedCorpus::build(
        &td.val,
        &run.policy()?,
        &MaskContext::new(&td.vocab),
        run.rng(S_MASK).next_u64(),
    )?;
    write(&run.path(&run.masked_name()), &mc.to_tsv(&td.vocab))?;
    write(
        &run.path("prepare.json"),
        &to_json(&json!({
            "train": td.train.len(),
            "val": td.val.len(),
            "vocab": td.vocab.len(),
            "policy": d.policy,
            "masked_tokens": mc.masked_token_count(),
        }))?,
    )?;
    Ok(())
}

fn subset(set: &ImageSet, idx: &[usize]) -> ImageSet {
    let d = set.pixels_per_image();
    let mut images = set.images.clone();
    let mut labels = set.labels.clone();
    images.dims[0] = idx.len();
    labels.dims[0] = idx.len();
    images.data = idx.iter().flat_map(|&i| set.images.data[i * d..(i + 1) * d].iter().copied()).collect();
    labels.data = idx.iter().map(|&i| set.labels.data[i]).collect();
    ImageSet { images, labels }
}

// ---------------------------------------------------------------- pretrain

/// Trains `host` from scratch and returns the store with the best
/// validation loss when `keep_best`, else the final one.
fn pretrain_loop<H: Host>(
    host: &mut H,
    train: &H::Data,
    val: &H::Data,
    epochs: usize,
    opt: &mut OptimizerState,
    rng: &mut Rng,
    log: &mut CurveLog,
    keep_best: bool,
) -> R<(usize, f64)> {
    let mut best: Option<(usize, f64, dgmr_tensor::ParamStore)> = None;
    for epoch in 0..epochs {
        let tl = host.train_epoch(train, &mut NoHook, opt, rng)?;
        let vl = host.eval_loss(val, &no_hooks)?;
        log.append(epoch, Split::Train, Term::Ce, tl)?;
        log.append(epoch, Split::Val, Term::Ce, vl)?;
        if best.as_ref().map_or(true, |b| vl < b.1) {
            best = Some((epoch, vl, if keep_best { host.store().clone() } else { Default::default() }));
        }
    }
    let (e, v, s) = best.ok_or_else(|| CoreError::Config("pretraining needs at least one epoch".into()))?;
    if keep_best {
        *host.store_mut() = s;
    }
    Ok((e, v))
}

pub fn pretrain_host(args: &Common) -> R<()> {
    let run = Run::new(args)?;
    let epochs = args.epochs.unwrap_or(run.cfg.train.epochs);
    let lr = run.cfg.train.lr;
    let mut rng = run.rng(S_PRETRAIN);
    let mut opt = run.optimizer(lr);
    let mut log = CurveLog::create(run.path("pretrain_curves.csv"))?;
    let (host, best) = match &run.cfg.host {
        HostSection::Mlp { sizes } => {
            let (train, val) = (run.load_images("train")?, run.load_images("val")?);
            let mut m = MlpClassifier::new(train.x.cols(), sizes, &mut rng)?;
            let best = pretrain_loop(&mut m, &train, &val, epochs, &mut opt, &mut rng, &mut log, true)?;
            (AnyHost::Mlp(m), best)
        }
        HostSection::Transformer {
            hidden,
            heads,
            ffn,
            layers,
            max_len,
            dropout,
        } => {
            let (vocab, train, val) = run.load_text()?;
            let config = TransformerConfig {
                vocab: vocab.len(),
                hidden: *hidden,
                heads: *heads,
                ffn: *ffn,
                layers: *layers,
                max_len: *max_len,
                dropout: *dropout,
            };
            let mut m = TinyTransformer::new(config, &mut rng)?;
            let (train, val) = (run.mlm_data(train, 10)?, run.mlm_data(val, 11)?);
            let best = pretrain_loop(&mut m, &train, &val, epochs, &mut opt, &mut rng, &mut log, false)?;
            (AnyHost::Transformer(m), best)
        }
        HostSection::Seq2seq { emb, hidden, max_len } => {
            let (vocab, train, val) = run.load_text()?;
            let config = Seq2seqConfig {
                vocab: vocab.len(),
                emb: *emb,
                hidden: *hidden,
                max_len: *max_len,
            };
            let mut m = Seq2seq::new(config, &mut rng)?;
            let (train, val) = (run.pair_data(&vocab, &train, 0)?, run.pair_data(&vocab, &val, 1)?);
            let best = pretrain_loop(&mut m, &train, &val, epochs, &mut opt, &mut rng, &mut log, false)?;
            (AnyHost::Seq2seq(m), best)
        }
    };
    store::save_archive(&host.to_entries()?, run.path("host.ckpt"))?;
    write(
        &run.path("pretrain.json"),
        &to_json(&json!({"epochs": epochs, "best_epoch": best.0, "best_val_loss": best.1}))?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------- snapshot

pub fn snapshot(args: &Common) -> R<()> {
    let run = Run::new(args)?;
    let site = run.site()?;
    let limit = run.cfg.splice()?.snapshot_limit;
    let host = run.load_host("host.ckpt", "pretrain-host")?;
    let ckpt_id = format!("host.ckpt:{:016x}", host.store().checksum_where(|_| true));
    let ds = match host {
        AnyHost::Mlp(m) => {
            let data = run.load_images("train")?;
            let id = format!("train-images.idx:{}", data.y.len());
            splice::snapshot_hidden(&m, &site, &data, limit, &ckpt_id, &id)?
        }
        AnyHost::Transformer(m) => {
            let (_, train, _) = run.load_text()?;
            let id = format!("train.txt:{}", train.len());
            splice::snapshot_hidden(&m, &site, &run.mlm_data(train, 10)?, limit, &ckpt_id, &id)?
        }
        AnyHost::Seq2seq(m) => {
            let (vocab, train, _) = run.load_text()?;
            let id = format!("train.txt:{}", train.len());
            splice::snapshot_hidden(&m, &site, &run.pair_data(&vocab, &train, 0)?, limit, &ckpt_id, &id)?
        }
    };
    store::dump_hidden(&ds, run.path(&format!("hidden_{}.dump", site.location)))?;
    Ok(())
}

// ---------------------------------------------------------------- train-dgm

pub fn train_dgm(args: &Common) -> R<()> {
    let run = Run::new(args)?;
    let site = run.site()?;
    let d = run.cfg.dgm()?;
    let ds = store::load_hidden(run.need(&format!("hidden_{}.dump", site.location), "snapshot")?)?;
    if ds.meta.site != site.location.to_string() {
        return Err(CoreError::Site(format!("dump was taken at {}, config site is {}", ds.meta.site, site.location)).into());
    }
    let conditional = site.variant.conditional();
    let cfg = GmvaeConfig {
        dim_x: ds.meta.dim,
        dim_z: d.dim_z,
        dim_w: d.dim_w,
        k: d.k,
        hidden_width: d.hidden_width,
        depth: d.depth,
        sigma_dec: d.sigma_dec,
        dropout_rate: d.dropout_rate,
        learning_rate: d.learning_rate,
        epochs: args.epochs.unwrap_or(d.epochs),
        batch_size: d.batch_size,
        conditional,
        dim_h: ds.meta.cond_dim.unwrap_or(0),
        separate_prior_nets: d.separate_prior_nets,
    };
    cfg.validate()?;
    let mut rng = run.rng(S_DGM);
    let mut model = GmvaeModel::new(cfg.clone(), &mut rng)?;
    let mut opt = OptimizerState::adam(cfg.learning_rate);
    let mut log = CurveLog::create(run.path(&format!("dgm_{}_curves.csv", site.location)))?;
    for epoch in 0..cfg.epochs {
        let b = gmvae::train_epoch(&mut model, &mut opt, &ds.vectors, ds.conditioning.as_ref(), epoch, &mut rng)?;
        log.append(epoch, Split::Train, Term::Total, -b.total)?;
        log.append(epoch, Split::Train, Term::Reconstruction, -b.reconstruction)?;
        log.append(epoch, Split::Train, Term::KlZ, b.kl_z)?;
        log.append(epoch, Split::Train, Term::KlY, b.kl_y)?;
        log.append(epoch, Split::Train, Term::KlW, b.kl_w)?;
    }
    store::save_archive(&model.to_entries()?, run.path(&format!("dgm_{}.ckpt", site.location)))?;
    Ok(())
}

// ---------------------------------------------------------------- fine-tuning

/// Trains every parameter of `host` with no tap, optionally keeping the
/// epoch with the lowest validation loss.
#[allow(clippy::too_many_arguments)]
fn full_finetune<H: Host>(
    host: &mut H,
    train: &H::Data,
    val: &H::Data,
    epochs: usize,
    opt: &mut OptimizerState,
    rng: &mut Rng,
    log: &mut CurveLog,
    select_best: bool,
) -> R<()> {
    host.store_mut().set_trainable(|_| true);
    let mut best: Option<(f64, dgmr_tensor::ParamStore)> = None;
    for epoch in 0..epochs {
        let tl = host.train_epoch(train, &mut NoHook, opt, rng)?;
        let vl = host.eval_loss(val, &no_hooks)?;
        log.append(epoch, Split::Train, Term::Ce, tl)?;
        log.append(epoch, Split::Val, Term::Ce, vl)?;
        if select_best && best.as_ref().map_or(true, |b| vl < b.0) {
            best = Some((vl, host.store().clone()));
        }
    }
    if let Some((_, s)) = best {
        *host.store_mut() = s;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn splice_and_baseline<H: Host>(
    run: &Run,
    host: H,
    wrap: fn(H) -> AnyHost,
    site: &SpliceSite,
    dgm: GmvaeModel,
    above: (&H::Data, &H::Data),
    full: (&H::Data, &H::Data),
) -> R<()> {
    let noise = run.cfg.splice()?.noise_mode;
    let epochs = run.finetune_epochs();
    let lr = run.cfg.finetune_lr();
    let tag = site.location.to_string();
    let select_best = run.kind() != HostKind::Mlp;

    let mut base = host.clone();
    let mut log = CurveLog::create(run.path(&format!("baseline_{tag}_curves.csv")))?;
    full_finetune(
        &mut base,
        full.0,
        full.1,
        epochs,
        &mut run.optimizer(lr),
        &mut run.rng(S_BASELINE),
        &mut log,
        select_best,
    )?;
    save_wrapped(
        &run.path(&format!("baseline_{tag}.ckpt")),
        wrap(base),
        site,
        &StochasticLayer::Identity,
        noise,
    )?;

    let mut s: SplicedHost<H> = splice::splice_layer(host, *site, dgm, noise)?;
    s.select_best = select_best;
    let mut log = CurveLog::create(run.path(&format!("spliced_{tag}_curves.csv")))?;
    s.finetune_above(above.0, above.1, epochs, &mut run.optimizer(lr), &mut run.rng(S_SPLICE), Some(&mut log))?;
    save_wrapped(&run.path(&format!("spliced_{tag}.ckpt")), wrap(s.host), site, &s.layer, noise)?;
    Ok(())
}

pub fn splice_finetune(args: &Common) -> R<()> {
    let run = Run::new(args)?;
    let site = run.site()?;
    let host = run.load_host("host.ckpt", "pretrain-host")?;
    let dgm_entries = store::load_archive(run.need(&format!("dgm_{}.ckpt", site.location), "train-dgm")?)?;
    let dgm = GmvaeModel::from_entries(&dgm_entries)?;
    match host {
        AnyHost::Mlp(m) => {
            let (train, val) = (run.load_images("train")?, run.load_images("val")?);
            let layer = match site.location {
                dgmr_core::hosts::Location::MlpAfter(i) => i,
                _ => unreachable!("site kind checked against host kind"),
            };
            let (ct, cv) = (m.cache_at(&train, layer)?, m.cache_at(&val, layer)?);
            splice_and_baseline(&run, m, AnyHost::Mlp, &site, dgm, (&ct, &cv), (&train, &val))
        }
        AnyHost::Transformer(m) => {
            let (_, train, val) = run.load_text()?;
            let (train, val) = (run.mlm_data(train, 10)?, run.mlm_data(val, 11)?);
            splice_and_baseline(&run, m, AnyHost::Transformer, &site, dgm, (&train, &val), (&train, &val))
        }
        AnyHost::Seq2seq(m) => {
            let (vocab, train, val) = run.load_text()?;
            let (train, val) = (run.pair_data(&vocab, &train, 0)?, run.pair_data(&vocab, &val, 1)?);
            splice_and_baseline(&run, m, AnyHost::Seq2seq, &site, dgm, (&train, &val), (&train, &val))
        }
    }
}

fn dropout_generic<H: Host>(
    run: &Run,
    host: H,
    wrap: fn(H) -> AnyHost,
    site: &SpliceSite,
    rate: f32,
    train: &H::Data,
    val: &H::Data,
) -> R<()> {
    let name = format!("dropout_{}_{rate}", site.location);
    let mut log = CurveLog::create(run.path(&format!("{name}_curves.csv")))?;
    let (s, _) = splice::dropout_baseline(
        host,
        site.location,
        rate,
        train,
        val,
        run.finetune_epochs(),
        &mut run.optimizer(run.cfg.finetune_lr()),
        &mut run.rng(S_DROPOUT),
        Some(&mut log),
    )?;
    save_wrapped(&run.path(&format!("{name}.ckpt")), wrap(s.host), &s.site, &s.layer, s.noise_mode)
}

pub fn baseline_dropout(args: &Common) -> R<()> {
    let run = Run::new(args)?;
    let site = run.site()?;
    let rate = args.rate.unwrap_or(run.cfg.splice()?.dropout_rate);
    match run.load_host("host.ckpt", "pretrain-host")? {
        AnyHost::Mlp(m) => {
            let (train, val) = (run.load_images("train")?, run.load_images("val")?);
            let layer = match site.location {
                dgmr_core::hosts::Location::MlpAfter(i) => i,
                _ => unreachable!("site kind checked against host kind"),
            };
            let (ct, cv) = (m.cache_at(&train, layer)?, m.cache_at(&val, layer)?);
            dropout_generic(&run, m, AnyHost::Mlp, &site, rate, &ct, &cv)
        }
        AnyHost::Transformer(m) => {
            let (_, train, val) = run.load_text()?;
            let (train, val) = (run.mlm_data(train, 10)?, run.mlm_data(val, 11)?);
            dropout_generic(&run, m, AnyHost::Transformer, &site, rate, &train, &val)
        }
        AnyHost::Seq2seq(m) => {
            let (vocab, train, val) = run.load_text()?;
            let (train, val) = (run.pair_data(&vocab, &train, 0)?, run.pair_data(&vocab, &val, 1)?);
            dropout_generic(&run, m, AnyHost::Seq2seq, &site, rate, &train, &val)
        }
    }
}

// ---------------------------------------------------------------- evaluate

/// Text evaluation of one wrapped checkpoint.
fn eval_text(run: &Run, loaded: Loaded, mc: &MaskedCorpus, want: bool, topk: usize) -> R<(TextEval, Vec<Vec<Vec<usize>>>)> {
    let seed = run.rng(S_EVAL).next_u64();
    let Loaded { host, site, layer, noise } = loaded;
    match host {
        AnyHost::Transformer(m) => {
            let s = splice::with_layer(m, site, layer, noise)?;
            let hooks = s.eval_hooks(seed);
            let ev = pipeline::eval_transformer(&s.host, mc, &hooks, want, EVAL_BATCH)?;
            let top = if topk > 1 {
                let inputs: Vec<Vec<usize>> = mc.sentences.iter().map(|s| s.masked.clone()).collect();
                let pos: Vec<Vec<usize>> = mc.sentences.iter().map(|s| s.positions.clone()).collect();
                s.host
                    .predict(&inputs, &pos, topk, EVAL_BATCH, &hooks)?
                    .into_iter()
                    .map(|ps| ps.into_iter().map(|p| p.topk).collect())
                    .collect()
            } else {
                Vec::new()
            };
            Ok((ev, top))
        }
        AnyHost::Seq2seq(m) => {
            let s = splice::with_layer(m, site, layer, noise)?;
            let hooks = s.eval_hooks(seed);
            Ok((pipeline::eval_seq2seq(&s.host, mc, &hooks, want, EVAL_BATCH)?, Vec::new()))
        }
        AnyHost::Mlp(_) => Err(CoreError::Config("text evaluation on an mlp host".into()).into()),
    }
}

fn eval_mlp(run: &Run, loaded: Loaded, val: &MlpData) -> R<serde_json::Value> {
    let seed = run.rng(S_EVAL).next_u64();
    let Loaded { host, site, layer, noise } = loaded;
    let AnyHost::Mlp(m) = host else {
        return Err(CoreError::Config("image evaluation on a text host".into()).into());
    };
    let s = splice::with_layer(m, site, layer, noise)?;
    let hooks = s.eval_hooks(seed);
    Ok(json!({
        "val_loss": s.host.eval_loss(val, &hooks)?,
        "accuracy": s.host.accuracy_with(val, &hooks)?,
    }))
}

fn text_json(ev: &TextEval) -> serde_json::Value {
    json!({"report": ev.report, "mean_entropy": ev.mean_entropy})
}

pub fn evaluate(args: &Common) -> R<()> {
    let run = Run::new(args)?;
    let site = run.site()?;
    let tag = site.location.to_string();
    let base = run.load_wrapped(&format!("baseline_{tag}.ckpt"), "splice-finetune")?;
    let spliced = run.load_wrapped(&format!("spliced_{tag}.ckpt"), "splice-finetune")?;
    let (out, tsv) = if run.kind() == HostKind::Mlp {
        let val = run.load_images("val")?;
        let b = eval_mlp(&run, base, &val)?;
        let s = eval_mlp(&run, spliced, &val)?;
        let tsv = format!(
            "model\tval_loss\taccuracy\nbaseline\t{:.6}\t{:.6}\nspliced\t{:.6}\t{:.6}\n",
            b["val_loss"].as_f64().unwrap_or(f64::NAN),
            b["accuracy"].as_f64().unwrap_or(f64::NAN),
            s["val_loss"].as_f64().unwrap_or(f64::NAN),
            s["accuracy"].as_f64().unwrap_or(f64::NAN),
        );
        (json!({"site": tag, "seed": run.cfg.data.seed, "baseline": b, "spliced": s}), tsv)
    } else {
        let (vocab, _, _) = run.load_text()?;
        let mc = run.load_masked(&vocab)?;
        let want = !args.no_masked_bleu;
        let (b, _) = eval_text(&run, base, &mc, want, 1)?;
        let (s, _) = eval_text(&run, spliced, &mc, want, 1)?;
        let warnings: Vec<String> = b
            .warnings
            .iter()
            .map(|w| format!("baseline: {w}"))
            .chain(s.warnings.iter().map(|w| format!("spliced: {w}")))
            .collect();
        for w in &warnings {
            eprintln!("dgmr: warning: {w}");
        }
        let tsv = format!(
            "model\t{}\nbaseline\t{}\nspliced\t{}\n",
            dgmr_core::metrics::EvalReport::TSV_HEADER,
            b.report.to_tsv_line(),
            s.report.to_tsv_line()
        );
        (
            json!({
                "site": tag,
                "policy": run.cfg.data.policy,
                "seed": run.cfg.data.seed,
                "baseline": text_json(&b),
                "spliced": text_json(&s),
                "warnings": warnings,
            }),
            tsv,
        )
    };
    write(&run.path(&format!("eval_{tag}.json")), &to_json(&out)?)?;
    write(&run.path(&format!("eval_{tag}.tsv")), &tsv)?;
    Ok(())
}

// ---------------------------------------------------------------- impute

pub fn impute(args: &Common) -> R<()> {
    let run = Run::new(args)?;
    if run.kind() == HostKind::Mlp {
        return Err(CoreError::Config("impute needs a transformer or seq2seq host".into()).into());
    }
    let site = run.site()?;
    let tag = site.location.to_string();
    let topk = args.topk.unwrap_or(1);
    if topk == 0 {
        return Err(CoreError::Config("--topk must be at least 1".into()).into());
    }
    let base = run.load_wrapped(&format!("baseline_{tag}.ckpt"), "splice-finetune")?;
    let spliced = run.load_wrapped(&format!("spliced_{tag}.ckpt"), "splice-finetune")?;
    let (vocab, _, _) = run.load_text()?;
    let mc = run.load_masked(&vocab)?;
    let (b, btop) = eval_text(&run, base, &mc, false, topk)?;
    let (s, stop) = eval_text(&run, spliced, &mc, false, topk)?;
    let mut text = String::new();
    for (i, ms) in mc.sentences.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        text.push_str(&report::record(
            &vocab.decode(&ms.original),
            &ms.positions,
            &vocab.decode(&b.outputs[i]),
            &vocab.decode(&s.outputs[i]),
        ));
    }
    write(&run.path(&format!("impute_{tag}.txt")), &text)?;
    if !btop.is_empty() {
        let mut t = String::from("sentence\tposition\tmodel\tcandidates\n");
        for (i, ms) in mc.sentences.iter().enumerate() {
            for (j, &p) in ms.positions.iter().enumerate() {
                for (name, top) in [("baseline", &btop), ("spliced", &stop)] {
                    t.push_str(&format!("{i}\t{p}\t{name}\t{}\n", vocab.decode(&top[i][j]).join(" ")));
                }
            }
        }
        write(&run.path(&format!("impute_{tag}_topk.tsv")), &t)?;
    }
    Ok(())
}
