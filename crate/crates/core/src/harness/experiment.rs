//! Dataset generation, retrospective undersampling, training, sampling,
//! evaluation and the repeated-sampling study, each reading and writing
//! plain directories.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, Axis, Ix3, Ix4, Ix5};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{DimoError, Result};
use crate::harness::config::{ExperimentConfig, MaskSpec, Mode};
use crate::harness::dataset::DatasetContainer;
use crate::harness::phantom::{
    default_regions, erode, make_quant_phantom, make_static_phantom, reference_fit, TissueRegion,
};
use crate::metrics::{
    edge_mask, high_frequency_energy, mass_fraction, nmse, MeanStd, MetricReport, SliceMetrics, UncertaintyMaps,
};
use crate::mri::{reconstruct_image, CoilMaps, ForwardModel, KSpace, SamplingMask};
use crate::quant_dimo::{
    zero_filled_fit, ChannelScaling, QuantAcquisition, QuantDimo, QuantModelConfig, QuantTrainSample,
};
use crate::static_dimo::{kspace_scale, StaticAcquisition, StaticDimo, StaticModelConfig, StaticTrainSample};
use crate::vfa::{AcquisitionProtocol, FitSettings, MultiFlipAcquisition, ParamMaps};

const REPORT_FILE: &str = "report.json";
const SAMPLE_CHUNK: usize = 10;

fn shape_err(e: ndarray::ShapeError) -> DimoError {
    DimoError::Data(e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn stack2<T: Clone>(items: &[Array2<T>]) -> Result<ArrayD<T>> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).map_err(shape_err)?.into_dyn())
}

fn stack3<T: Clone>(items: &[Array3<T>]) -> Result<ArrayD<T>> {
    let views: Vec<_> = items.iter().map(|a| a.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).map_err(shape_err)?.into_dyn())
}

fn bool_to_f64(a: &Array2<bool>) -> Array2<f64> {
    a.mapv(|v| if v { 1.0 } else { 0.0 })
}

fn meta_field<T: for<'de> Deserialize<'de>>(ds: &DatasetContainer, key: &str) -> Result<T> {
    let value = ds.metadata().get(key).ok_or_else(|| DimoError::Data(format!("dataset metadata lacks {key}")))?;
    serde_json::from_value(value.clone()).map_err(|e| DimoError::Data(format!("metadata {key}: {e}")))
}

fn expect_mode(ds: &DatasetContainer, mode: Mode) -> Result<()> {
    if ds.mode() != mode.as_str() {
        return Err(DimoError::Data(format!(
            "{} holds {} data, expected {}",
            ds.dir().display(),
            ds.mode(),
            mode.as_str()
        )));
    }
    Ok(())
}

/// Train/test split recorded in every dataset manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub n_train: usize,
    pub n_test: usize,
}

impl Split {
    pub fn train(&self) -> std::ops::Range<usize> {
        0..self.n_train
    }

    pub fn test(&self) -> std::ops::Range<usize> {
        self.n_train..self.n_train + self.n_test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Undersampling {
    pub mask: MaskSpec,
    pub base_seed: u64,
}

/// Writes a fully sampled phantom dataset to `out`.
pub fn make_phantom(cfg: &ExperimentConfig, out: &Path) -> Result<DatasetContainer> {
    let spec = cfg.phantom_spec();
    let split = Split { n_train: cfg.phantom.n_train, n_test: cfg.phantom.n_test };
    let meta = json!({
        "phantom": spec,
        "split": split,
        "seeds": cfg.seeds(),
        "split_rule": "slices [0, n_train) train the prior; the remaining slices are held out for testing",
    });
    match cfg.mode {
        Mode::Static => {
            let p = make_static_phantom(&spec, cfg.phantom.contrast)?;
            let mut ds = DatasetContainer::create(out, "static", meta)?;
            ds.set_metadata("contrast", json!(cfg.phantom.contrast))?;
            let images: Vec<Array2<Complex64>> = p.images.iter().map(|i| i.data().clone()).collect();
            let maps: Vec<Array3<Complex64>> = p.coil_maps.iter().map(|m| m.maps().clone()).collect();
            let kspace: Vec<Array3<Complex64>> = p.kspace.iter().map(|k| k.data().clone()).collect();
            ds.write_complex("images", &stack2(&images)?)?;
            ds.write_complex("coil_maps", &stack3(&maps)?)?;
            ds.write_complex("kspace", &stack3(&kspace)?)?;
            Ok(ds)
        }
        Mode::Quant => {
            let protocol = cfg.protocol.build()?;
            let regions = default_regions();
            let p = make_quant_phantom(&spec, &regions, &protocol, &FitSettings::default())?;
            let mut peak = 0.0f64;
            for (ks, maps) in p.kspace.iter().zip(&p.coil_maps) {
                for k in ks {
                    peak = peak.max(reconstruct_image(k, maps)?.data().iter().fold(0.0, |m, v| m.max(v.norm())));
                }
            }
            let fit = cfg.fit.settings(peak);
            let mut ds = DatasetContainer::create(out, "quant", meta)?;
            ds.set_metadata("protocol", json!(cfg.protocol))?;
            ds.set_metadata("regions", json!(regions))?;
            ds.set_metadata("fit", json!(fit))?;
            let mut ref_t1 = Vec::new();
            let mut ref_i0 = Vec::new();
            let mut ref_valid = Vec::new();
            for (ks, maps) in p.kspace.iter().zip(&p.coil_maps) {
                let f = reference_fit(ks, maps, &protocol, &fit)?;
                ref_t1.push(f.params.t1().clone());
                ref_i0.push(f.params.i0().clone());
                ref_valid.push(bool_to_f64(&f.valid));
            }
            let design_t1: Vec<Array2<f64>> = p.design.iter().map(|d| d.t1().clone()).collect();
            let design_i0: Vec<Array2<Complex64>> = p.design.iter().map(|d| d.i0().clone()).collect();
            let labels: Vec<Array2<f64>> = p.labels.iter().map(|l| l.mapv(f64::from)).collect();
            let maps: Vec<Array3<Complex64>> = p.coil_maps.iter().map(|m| m.maps().clone()).collect();
            let kspace: Vec<ArrayD<Complex64>> = p
                .kspace
                .iter()
                .map(|ks| stack3(&ks.iter().map(|k| k.data().clone()).collect::<Vec<_>>()))
                .collect::<Result<_>>()?;
            let kviews: Vec<_> = kspace.iter().map(|k| k.view()).collect();
            ds.write_real("design_t1", &stack2(&design_t1)?)?;
            ds.write_complex("design_i0", &stack2(&design_i0)?)?;
            ds.write_real("labels", &stack2(&labels)?)?;
            ds.write_complex("coil_maps", &stack3(&maps)?)?;
            ds.write_complex("kspace", &ndarray::stack(Axis(0), &kviews).map_err(shape_err)?)?;
            ds.write_real("reference_t1", &stack2(&ref_t1)?)?;
            ds.write_complex("reference_i0", &stack2(&ref_i0)?)?;
            ds.write_real("reference_valid", &stack2(&ref_valid)?)?;
            Ok(ds)
        }
    }
}

fn copy_dataset(src: &DatasetContainer, out: &Path) -> Result<DatasetContainer> {
    if src.dir() == out {
        return Err(DimoError::Config("undersampling output must differ from its input".into()));
    }
    let mut ds = DatasetContainer::create(out, src.mode(), src.metadata().clone())?;
    for (name, entry) in &src.manifest().arrays {
        if entry.complex {
            ds.write_complex(name, &src.read_complex(name)?)?;
        } else {
            ds.write_real(name, &src.read_real(name)?)?;
        }
    }
    Ok(ds)
}

fn masked(k: &ndarray::ArrayView3<Complex64>, mask: &SamplingMask) -> Array3<Complex64> {
    let mut out = k.to_owned();
    for mut coil in out.outer_iter_mut() {
        coil.zip_mut_with(mask.mask(), |v, &m| {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            }
        });
    }
    out
}

/// Copies the fully sampled dataset at `src` to `out` and adds masks and
/// zero-filled measurements; flip angles get distinct masks.
pub fn undersample(src: &Path, out: &Path, mask: MaskSpec, base_seed: u64) -> Result<DatasetContainer> {
    let src = DatasetContainer::open(src)?;
    if src.has("masks") {
        return Err(DimoError::Data(format!("{} is already undersampled", src.dir().display())));
    }
    let mut ds = copy_dataset(&src, out)?;
    let kspace = src.read_complex("kspace")?;
    let shape = kspace.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    match src.mode() {
        "static" => {
            let k = kspace.into_dimensionality::<Ix4>().map_err(shape_err)?;
            let mut masks = Vec::new();
            let mut measured = Vec::new();
            for (s, slice) in k.outer_iter().enumerate() {
                let m = mask.build(h, w, MaskSpec::seed_for(base_seed, s, 0))?;
                measured.push(masked(&slice, &m));
                masks.push(bool_to_f64(m.mask()));
            }
            ds.write_real("masks", &stack2(&masks)?)?;
            ds.write_complex("measured", &stack3(&measured)?)?;
        }
        "quant" => {
            let k = kspace.into_dimensionality::<Ix5>().map_err(shape_err)?;
            let mut masks = Vec::new();
            let mut measured = Vec::new();
            for (s, slice) in k.outer_iter().enumerate() {
                let mut slice_masks = Vec::new();
                let mut slice_meas = Vec::new();
                for (a, angle) in slice.outer_iter().enumerate() {
                    let m = mask.build(h, w, MaskSpec::seed_for(base_seed, s, a))?;
                    slice_meas.push(masked(&angle, &m));
                    slice_masks.push(bool_to_f64(m.mask()));
                }
                masks.push(stack2(&slice_masks)?.into_dimensionality::<Ix3>().map_err(shape_err)?);
                let views: Vec<_> = slice_meas.iter().map(|a| a.view()).collect();
                measured.push(ndarray::stack(Axis(0), &views).map_err(shape_err)?);
            }
            ds.write_real("masks", &stack3(&masks)?)?;
            let views: Vec<_> = measured.iter().map(|a| a.view()).collect();
            ds.write_complex("measured", &ndarray::stack(Axis(0), &views).map_err(shape_err)?.into_dyn())?;
        }
        other => return Err(DimoError::Data(format!("unknown dataset mode {other}"))),
    }
    ds.set_metadata("undersampling", json!(Undersampling { mask, base_seed }))?;
    Ok(ds)
}

/// Regenerates a stored mask from its seed and checks it bit for bit.
fn stored_mask(
    spec: &Undersampling,
    stored: &ndarray::ArrayView2<f64>,
    slice: usize,
    angle: usize,
) -> Result<SamplingMask> {
    let (h, w) = stored.dim();
    let m = spec.mask.build(h, w, MaskSpec::seed_for(spec.base_seed, slice, angle))?;
    if ndarray::Zip::from(m.mask()).and(stored).any(|&a, &b| a != (b != 0.0)) {
        return Err(DimoError::Data(format!("stored mask of slice {slice} angle {angle} does not match its seed")));
    }
    Ok(m)
}

/// A static dataset with its retrospective acquisitions.
pub struct StaticData {
    pub split: Split,
    pub undersampling: Undersampling,
    pub coil_maps: Vec<CoilMaps>,
    pub full: Vec<KSpace>,
    pub acquisitions: Vec<StaticAcquisition>,
}

impl StaticData {
    pub fn load(ds: &DatasetContainer) -> Result<Self> {
        expect_mode(ds, Mode::Static)?;
        let split: Split = meta_field(ds, "split")?;
        let undersampling: Undersampling = meta_field(ds, "undersampling")?;
        let maps = ds.read_complex("coil_maps")?.into_dimensionality::<Ix4>().map_err(shape_err)?;
        let full = ds.read_complex("kspace")?.into_dimensionality::<Ix4>().map_err(shape_err)?;
        let measured = ds.read_complex("measured")?.into_dimensionality::<Ix4>().map_err(shape_err)?;
        let masks = ds.read_real("masks")?.into_dimensionality::<Ix3>().map_err(shape_err)?;
        let n = maps.dim().0;
        if n != split.n_train + split.n_test || full.dim().0 != n || measured.dim().0 != n || masks.dim().0 != n {
            return Err(DimoError::Data("array slice counts disagree with the split".into()));
        }
        let mut out = Self { split, undersampling, coil_maps: Vec::new(), full: Vec::new(), acquisitions: Vec::new() };
        for s in 0..n {
            let cm = CoilMaps::new(maps.index_axis(Axis(0), s).to_owned())?;
            let mask = stored_mask(&undersampling, &masks.index_axis(Axis(0), s), s, 0)?;
            let model = ForwardModel::new(cm.clone(), mask)?;
            out.acquisitions
                .push(StaticAcquisition::new(model, KSpace::new(measured.index_axis(Axis(0), s).to_owned())?)?);
            out.full.push(KSpace::new(full.index_axis(Axis(0), s).to_owned())?);
            out.coil_maps.push(cm);
        }
        Ok(out)
    }

    pub fn train_samples(&self) -> Vec<StaticTrainSample> {
        self.split
            .train()
            .map(|s| StaticTrainSample { fhat0: self.full[s].clone(), acquisition: self.acquisitions[s].clone() })
            .collect()
    }
}

/// A quantitative dataset with its per-angle acquisitions.
pub struct QuantData {
    pub split: Split,
    pub undersampling: Undersampling,
    pub protocol: AcquisitionProtocol,
    pub fit: FitSettings,
    pub regions: Vec<TissueRegion>,
    pub labels: Vec<Array2<u8>>,
    pub design_t1: Vec<Array2<f64>>,
    pub reference: Vec<ParamMaps>,
    pub acquisitions: Vec<QuantAcquisition>,
}

impl QuantData {
    pub fn load(ds: &DatasetContainer) -> Result<Self> {
        expect_mode(ds, Mode::Quant)?;
        let split: Split = meta_field(ds, "split")?;
        let undersampling: Undersampling = meta_field(ds, "undersampling")?;
        let protocol: crate::harness::config::ProtocolConfig = meta_field(ds, "protocol")?;
        let protocol = protocol.build()?;
        let fit: FitSettings = meta_field(ds, "fit")?;
        let regions: Vec<TissueRegion> = meta_field(ds, "regions")?;
        let maps = ds.read_complex("coil_maps")?.into_dimensionality::<Ix4>().map_err(shape_err)?;
        let measured = ds.read_complex("measured")?.into_dimensionality::<Ix5>().map_err(shape_err)?;
        let masks = ds.read_real("masks")?.into_dimensionality::<Ix4>().map_err(shape_err)?;
        let labels = ds.read_real("labels")?.into_dimensionality::<Ix3>().map_err(shape_err)?;
        let design_t1 = ds.read_real("design_t1")?.into_dimensionality::<Ix3>().map_err(shape_err)?;
        let ref_t1 = ds.read_real("reference_t1")?.into_dimensionality::<Ix3>().map_err(shape_err)?;
        let ref_i0 = ds.read_complex("reference_i0")?.into_dimensionality::<Ix3>().map_err(shape_err)?;
        let n = maps.dim().0;
        if n != split.n_train + split.n_test || measured.dim().0 != n || measured.dim().1 != protocol.n_angles() {
            return Err(DimoError::Data("array shapes disagree with the split or protocol".into()));
        }
        let mut out = Self {
            split,
            undersampling,
            protocol: protocol.clone(),
            fit,
            regions,
            labels: Vec::new(),
            design_t1: Vec::new(),
            reference: Vec::new(),
            acquisitions: Vec::new(),
        };
        for s in 0..n {
            let cm = CoilMaps::new(maps.index_axis(Axis(0), s).to_owned())?;
            let mut models = Vec::new();
            let mut kspace = Vec::new();
            for a in 0..protocol.n_angles() {
                let mask = stored_mask(&undersampling, &masks.index_axis(Axis(0), s).index_axis(Axis(0), a), s, a)?;
                models.push(ForwardModel::new(cm.clone(), mask)?);
                kspace.push(KSpace::new(measured.index_axis(Axis(0), s).index_axis(Axis(0), a).to_owned())?);
            }
            out.acquisitions.push(QuantAcquisition::new(MultiFlipAcquisition::new(models, kspace)?, protocol.clone())?);
            out.labels.push(labels.index_axis(Axis(0), s).mapv(|v| v as u8));
            out.design_t1.push(design_t1.index_axis(Axis(0), s).to_owned());
            out.reference.push(ParamMaps::new(
                ref_t1.index_axis(Axis(0), s).to_owned(),
                ref_i0.index_axis(Axis(0), s).to_owned(),
            )?);
        }
        Ok(out)
    }

    pub fn train_samples(&self) -> Vec<QuantTrainSample> {
        self.split
            .train()
            .map(|s| QuantTrainSample { params: self.reference[s].clone(), acquisition: self.acquisitions[s].clone() })
            .collect()
    }

    pub fn support(&self, slice: usize) -> Array2<bool> {
        self.labels[slice].mapv(|l| l > 0)
    }
}

/// Outcome of a training command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: String,
    pub epochs: u64,
    pub optimizer_steps: u64,
    pub final_epoch_loss: Option<f64>,
    pub step_sizes: Vec<f64>,
}

fn has_checkpoint(dir: &Path) -> bool {
    dir.join("checkpoint.json").exists()
}

enum Model {
    Static(StaticDimo),
    Quant(QuantDimo),
}

impl Model {
    fn epochs(&self) -> u64 {
        match self {
            Model::Static(m) => m.epochs(),
            Model::Quant(m) => m.epochs(),
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        match self {
            Model::Static(m) => m.save(dir),
            Model::Quant(m) => m.save(dir),
        }
    }
}

fn static_model_config(cfg: &ExperimentConfig) -> StaticModelConfig {
    StaticModelConfig {
        network: cfg.unet_config(),
        schedule: cfg.schedule,
        gd_steps: cfg.guidance.gd_steps,
        step_size_init: cfg.guidance.step_size_init,
        guidance: cfg.guidance.enabled,
    }
}

fn check_resume<T: PartialEq + std::fmt::Debug>(stored: &T, wanted: &T) -> Result<()> {
    if stored != wanted {
        return Err(DimoError::Config(format!("checkpoint was trained with {stored:?}, config asks for {wanted:?}")));
    }
    Ok(())
}

/// Trains (or resumes) the model for `cfg.mode` on the training slices of
/// the undersampled dataset at `data`, checkpointing into `ckpt`.
pub fn train(cfg: &ExperimentConfig, data: &Path, ckpt: &Path) -> Result<TrainSummary> {
    let ds = DatasetContainer::open(data)?;
    expect_mode(&ds, cfg.mode)?;
    let seeds = cfg.seeds();
    let batch = cfg.training.batch_size;
    let mut last = None;
    let mut model = match cfg.mode {
        Mode::Static => {
            let d = StaticData::load(&ds)?;
            let samples = d.train_samples();
            let model = if has_checkpoint(ckpt) {
                let m = StaticDimo::load(ckpt)?;
                check_resume(m.config(), &static_model_config(cfg))?;
                m
            } else {
                let scale = kspace_scale(samples.iter().map(|s| &s.fhat0))?;
                let mut m = StaticDimo::new(static_model_config(cfg), cfg.adam_config(), scale, seeds.training)?;
                m.fit_prior(&samples)?;
                m
            };
            let mut model = Model::Static(model);
            while let Model::Static(m) = &mut model {
                if m.epochs() >= cfg.training.epochs {
                    break;
                }
                last = Some(m.train_epoch(&samples, batch)?);
                checkpoint_if_due(cfg, &model, ckpt, last)?;
            }
            model
        }
        Mode::Quant => {
            let d = QuantData::load(&ds)?;
            let samples = d.train_samples();
            let model_cfg = QuantModelConfig {
                network: cfg.unet_config(),
                schedule: cfg.schedule,
                gd_steps: cfg.guidance.gd_steps,
                step_size_init: cfg.guidance.step_size_init,
                guidance: cfg.guidance.enabled,
                fit: d.fit,
            };
            let model = if has_checkpoint(ckpt) {
                let m = QuantDimo::load(ckpt)?;
                check_resume(m.config(), &model_cfg)?;
                m
            } else {
                let scaling = ChannelScaling::from_dataset(samples.iter().map(|s| &s.params))?;
                let mut m = QuantDimo::new(model_cfg, cfg.adam_config(), scaling, seeds.training)?;
                m.fit_prior(&samples)?;
                m
            };
            let mut model = Model::Quant(model);
            while let Model::Quant(m) = &mut model {
                if m.epochs() >= cfg.training.epochs {
                    break;
                }
                last = Some(m.train_epoch(&samples, batch)?);
                checkpoint_if_due(cfg, &model, ckpt, last)?;
            }
            model
        }
    };
    model.save(ckpt)?;
    cfg.save(&ckpt.join("config.toml"))?;
    let (steps, step_sizes) = match &mut model {
        Model::Static(m) => (m.losses().len() as u64, m.net().step_sizes().to_vec()?),
        Model::Quant(m) => (m.losses().len() as u64, m.net().step_sizes().to_vec()?),
    };
    Ok(TrainSummary {
        mode: cfg.mode.as_str().into(),
        epochs: model.epochs(),
        optimizer_steps: steps,
        final_epoch_loss: last,
        step_sizes,
    })
}

fn checkpoint_if_due(cfg: &ExperimentConfig, model: &Model, ckpt: &Path, loss: Option<f64>) -> Result<()> {
    let e = model.epochs();
    if e.is_multiple_of(cfg.training.checkpoint_every) && e < cfg.training.epochs {
        model.save(ckpt)?;
        if let Some(l) = loss {
            eprintln!("epoch {e}: mean loss {l:.5}");
        }
    }
    Ok(())
}

/// Image metrics of a static reconstruction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticReport {
    pub af: f64,
    pub n_slices: usize,
    pub dimo: MetricReport,
    pub zero_filled: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub name: String,
    pub design_t1: f64,
    pub pixels: usize,
    pub dimo: MeanStd,
    pub zero_filled: MeanStd,
    pub reference: MeanStd,
    /// `|mean(dimo) - design| / design`.
    pub dimo_rel_error: f64,
}

/// T1 accuracy of a quantitative reconstruction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub af: f64,
    pub n_slices: usize,
    pub t1_nmse_dimo: Vec<f64>,
    pub t1_nmse_zero_filled: Vec<f64>,
    pub mean_t1_nmse_dimo: f64,
    pub mean_t1_nmse_zero_filled: f64,
    pub invalid_fraction_dimo: f64,
    pub regions: Vec<RegionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalReport {
    Static(StaticReport),
    Quant(QuantReport),
}

fn chunked<T, R>(jobs: &[T], mut f: impl FnMut(&[T]) -> Result<Vec<R>>) -> Result<Vec<R>> {
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(SAMPLE_CHUNK) {
        out.extend(f(chunk)?);
    }
    Ok(out)
}

fn load_model_for(cfg: &ExperimentConfig, ckpt: &Path) -> Result<Model> {
    if !has_checkpoint(ckpt) {
        return Err(DimoError::Data(format!("no checkpoint in {}", ckpt.display())));
    }
    Ok(match cfg.mode {
        Mode::Static => Model::Static(StaticDimo::load(ckpt)?),
        Mode::Quant => Model::Quant(QuantDimo::load(ckpt)?),
    })
}

/// Reconstructs every held-out slice, stores the results in `out` and
/// evaluates them.
pub fn sample(cfg: &ExperimentConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<EvalReport> {
    let ds = DatasetContainer::open(data)?;
    expect_mode(&ds, cfg.mode)?;
    let seeds = cfg.seeds();
    let model = load_model_for(cfg, ckpt)?;
    match model {
        Model::Static(m) => {
            let d = StaticData::load(&ds)?;
            let test: Vec<usize> = d.split.test().collect();
            let jobs: Vec<(&StaticAcquisition, u64)> =
                test.iter().map(|&s| (&d.acquisitions[s], seeds.sampling.wrapping_add(s as u64))).collect();
            let recon = chunked(&jobs, |c| m.sample(c))?;
            let mut dimo = Vec::new();
            let mut zf = Vec::new();
            let mut reference = Vec::new();
            for (k, &s) in recon.iter().zip(&test) {
                let maps = &d.coil_maps[s];
                dimo.push(reconstruct_image(k, maps)?.into_inner());
                zf.push(reconstruct_image(d.acquisitions[s].measured(), maps)?.into_inner());
                reference.push(reconstruct_image(&d.full[s], maps)?.magnitude());
            }
            let mut rc = DatasetContainer::create(out, "static-recon", recon_meta(cfg, &ds, d.undersampling, ckpt))?;
            rc.write_complex("dimo", &stack2(&dimo)?)?;
            rc.write_complex("zero_filled", &stack2(&zf)?)?;
            rc.write_real("reference", &stack2(&reference)?)?;
        }
        Model::Quant(m) => {
            let d = QuantData::load(&ds)?;
            let test: Vec<usize> = d.split.test().collect();
            let jobs: Vec<(&QuantAcquisition, u64)> =
                test.iter().map(|&s| (&d.acquisitions[s], seeds.sampling.wrapping_add(s as u64))).collect();
            let recon = chunked(&jobs, |c| m.sample(c))?;
            let mut rc = DatasetContainer::create(out, "quant-recon", recon_meta(cfg, &ds, d.undersampling, ckpt))?;
            rc.set_metadata("regions", json!(d.regions))?;
            rc.set_metadata("roi_erosion", json!(cfg.evaluation.roi_erosion))?;
            let mut cols: [Vec<Array2<f64>>; 6] = Default::default();
            for (r, &s) in recon.iter().zip(&test) {
                let zf = zero_filled_fit(&d.acquisitions[s], &d.fit)?;
                cols[0].push(r.params.t1().clone());
                cols[1].push(bool_to_f64(&r.valid));
                cols[2].push(zf.params.t1().clone());
                cols[3].push(d.reference[s].t1().clone());
                cols[4].push(d.design_t1[s].clone());
                cols[5].push(d.labels[s].mapv(f64::from));
            }
            let names = ["dimo_t1", "dimo_valid", "zero_filled_t1", "reference_t1", "design_t1", "labels"];
            for (name, col) in names.iter().zip(&cols) {
                rc.write_real(name, &stack2(col)?)?;
            }
            let i0: Vec<Array2<Complex64>> = recon.iter().map(|r| r.params.i0().clone()).collect();
            rc.write_complex("dimo_i0", &stack2(&i0)?)?;
        }
    }
    evaluate(out)
}

fn recon_meta(cfg: &ExperimentConfig, ds: &DatasetContainer, us: Undersampling, ckpt: &Path) -> serde_json::Value {
    json!({
        "source_dataset": ds.dir(),
        "checkpoint": ckpt,
        "af": us.mask.af,
        "undersampling": us,
        "sampling_seed": cfg.seeds().sampling,
        "config": cfg,
    })
}

/// Recomputes the metrics of a reconstruction directory and stores them
/// as `report.json` beside it.
pub fn evaluate(recon: &Path) -> Result<EvalReport> {
    let rc = DatasetContainer::open(recon)?;
    let af: f64 = meta_field(&rc, "af")?;
    let report = match rc.mode() {
        "static-recon" => {
            let dimo = rc.read_complex("dimo")?.into_dimensionality::<Ix3>().map_err(shape_err)?;
            let zf = rc.read_complex("zero_filled")?.into_dimensionality::<Ix3>().map_err(shape_err)?;
            let reference = rc.read_real("reference")?.into_dimensionality::<Ix3>().map_err(shape_err)?;
            let mut dm = Vec::new();
            let mut zm = Vec::new();
            for s in 0..reference.dim().0 {
                let r = reference.index_axis(Axis(0), s);
                let peak = r.iter().fold(0.0f64, |m, v| m.max(*v));
                if !(peak > 0.0) {
                    return Err(DimoError::Data(format!("reference slice {s} is empty")));
                }
                let r = r.mapv(|v| v / peak);
                let mag = |a: &Array3<Complex64>| a.index_axis(Axis(0), s).mapv(|v| v.norm() / peak);
                dm.push(SliceMetrics::compute(&mag(&dimo).view(), &r.view())?);
                zm.push(SliceMetrics::compute(&mag(&zf).view(), &r.view())?);
            }
            EvalReport::Static(StaticReport {
                af,
                n_slices: dm.len(),
                dimo: MetricReport::from_slices(dm)?,
                zero_filled: MetricReport::from_slices(zm)?,
            })
        }
        "quant-recon" => {
            let regions: Vec<TissueRegion> = meta_field(&rc, "regions")?;
            let erosion: usize = meta_field(&rc, "roi_erosion")?;
            let read = |n: &str| -> Result<ndarray::Array3<f64>> {
                rc.read_real(n)?.into_dimensionality::<Ix3>().map_err(shape_err)
            };
            let (dimo, valid, zf, reference, labels) = (
                read("dimo_t1")?,
                read("dimo_valid")?,
                read("zero_filled_t1")?,
                read("reference_t1")?,
                read("labels")?,
            );
            let n = dimo.dim().0;
            let support = labels.mapv(|l| l > 0.0);
            let in_support = |a: &Array3<f64>, s: usize| {
                ndarray::Zip::from(a.index_axis(Axis(0), s))
                    .and(support.index_axis(Axis(0), s))
                    .map_collect(|&v, &m| if m { v } else { 0.0 })
            };
            let mut nd = Vec::new();
            let mut nz = Vec::new();
            let mut invalid = 0usize;
            let mut support_px = 0usize;
            for s in 0..n {
                let r = in_support(&reference, s);
                nd.push(nmse(&in_support(&dimo, s).view(), &r.view())?);
                nz.push(nmse(&in_support(&zf, s).view(), &r.view())?);
                ndarray::Zip::from(valid.index_axis(Axis(0), s)).and(support.index_axis(Axis(0), s)).for_each(
                    |&v, &m| {
                        if m {
                            support_px += 1;
                            if v == 0.0 {
                                invalid += 1;
                            }
                        }
                    },
                );
            }
            let mut region_reports = Vec::new();
            for region in &regions {
                let pool = |a: &Array3<f64>| -> Vec<f64> {
                    let mut out = Vec::new();
                    for s in 0..n {
                        let roi = erode(&labels.index_axis(Axis(0), s).mapv(|l| l as u8 == region.label), erosion);
                        ndarray::Zip::from(a.index_axis(Axis(0), s)).and(&roi).for_each(|&v, &m| {
                            if m {
                                out.push(v);
                            }
                        });
                    }
                    out
                };
                let d = pool(&dimo);
                if d.is_empty() {
                    continue;
                }
                let stats = |v: Vec<f64>| MeanStd::of(v).expect("nonempty ROI");
                let dimo_stats = stats(d);
                region_reports.push(RegionReport {
                    name: region.name.clone(),
                    design_t1: region.t1,
                    pixels: pool(&reference).len(),
                    dimo_rel_error: (dimo_stats.mean - region.t1).abs() / region.t1,
                    dimo: dimo_stats,
                    zero_filled: stats(pool(&zf)),
                    reference: stats(pool(&reference)),
                });
            }
            EvalReport::Quant(QuantReport {
                af,
                n_slices: n,
                mean_t1_nmse_dimo: nd.iter().sum::<f64>() / n as f64,
                mean_t1_nmse_zero_filled: nz.iter().sum::<f64>() / n as f64,
                t1_nmse_dimo: nd,
                t1_nmse_zero_filled: nz,
                invalid_fraction_dimo: invalid as f64 / support_px.max(1) as f64,
                regions: region_reports,
            })
        }
        other => return Err(DimoError::Data(format!("{} is not a reconstruction ({other})", recon.display()))),
    };
    write_json(&recon.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Statistics of one repeated-sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEntry {
    pub n_samples: usize,
    pub mean_nmse: f64,
    pub total_variance: f64,
    pub variance_hf_energy: f64,
    pub edge_variance_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub mode: String,
    pub slice: usize,
    pub base_seed: u64,
    pub edge_pixel_fraction: f64,
    pub entries: Vec<UncertaintyEntry>,
}

/// Draws the largest requested number of samples for one held-out slice
/// and summarizes the leading `n` of them for every requested `n`.
pub fn uncertainty(cfg: &ExperimentConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<UncertaintyReport> {
    let ds = DatasetContainer::open(data)?;
    expect_mode(&ds, cfg.mode)?;
    let model = load_model_for(cfg, ckpt)?;
    let n_max = cfg.evaluation.uncertainty_counts.iter().copied().max().unwrap_or(0);
    if n_max < 2 {
        return Err(DimoError::Config("uncertainty study needs at least one count >= 2".into()));
    }
    let base_seed = cfg.seeds().sampling.wrapping_add(1 << 32);
    let seeds: Vec<u64> = (0..n_max as u64).map(|k| base_seed + k).collect();
    let (slice, samples, reference, edges) = match &model {
        Model::Static(m) => {
            let d = StaticData::load(&ds)?;
            let s = d.split.n_train + cfg.evaluation.uncertainty_slice;
            let jobs: Vec<(&StaticAcquisition, u64)> = seeds.iter().map(|&k| (&d.acquisitions[s], k)).collect();
            let reference = reconstruct_image(&d.full[s], &d.coil_maps[s])?.magnitude();
            let peak = reference.iter().fold(0.0f64, |m, v| m.max(*v));
            let samples: Vec<Array2<f64>> = chunked(&jobs, |c| m.sample(c))?
                .iter()
                .map(|k| Ok(reconstruct_image(k, &d.coil_maps[s])?.magnitude() / peak))
                .collect::<Result<_>>()?;
            let reference = reference / peak;
            let edges = edge_mask(&reference.view(), cfg.evaluation.edge_threshold, cfg.evaluation.edge_dilation);
            (s, samples, reference, edges)
        }
        Model::Quant(m) => {
            let d = QuantData::load(&ds)?;
            let s = d.split.n_train + cfg.evaluation.uncertainty_slice;
            let support = d.support(s);
            let jobs: Vec<(&QuantAcquisition, u64)> = seeds.iter().map(|&k| (&d.acquisitions[s], k)).collect();
            let restrict =
                |a: &Array2<f64>| ndarray::Zip::from(a).and(&support).map_collect(|&v, &m| if m { v } else { 0.0 });
            let samples: Vec<Array2<f64>> =
                chunked(&jobs, |c| m.sample(c))?.iter().map(|r| restrict(r.params.t1())).collect();
            let reference = restrict(d.reference[s].t1());
            let design = restrict(&d.design_t1[s]);
            let edges = edge_mask(&design.view(), cfg.evaluation.edge_threshold, cfg.evaluation.edge_dilation);
            (s, samples, reference, edges)
        }
    };
    let mut rc =
        DatasetContainer::create(out, "uncertainty", json!({"slice": slice, "base_seed": base_seed, "config": cfg}))?;
    rc.write_real("reference", &reference.clone().into_dyn())?;
    rc.write_real("edge_mask", &bool_to_f64(&edges).into_dyn())?;
    let mut entries = Vec::new();
    for &n in &cfg.evaluation.uncertainty_counts {
        let maps = UncertaintyMaps::from_samples(&samples[..n], &reference.view())?;
        rc.write_real(&format!("mean_n{n}"), &maps.mean_img.clone().into_dyn())?;
        rc.write_real(&format!("variance_n{n}"), &maps.variance_map.clone().into_dyn())?;
        rc.write_real(&format!("error_n{n}"), &maps.error_map.clone().into_dyn())?;
        entries.push(UncertaintyEntry {
            n_samples: n,
            mean_nmse: nmse(&maps.mean_img.view(), &reference.view())?,
            total_variance: maps.variance_map.sum(),
            variance_hf_energy: high_frequency_energy(&maps.variance_map.view()),
            edge_variance_fraction: mass_fraction(&maps.variance_map.view(), &edges.view())?,
        });
    }
    let report = UncertaintyReport {
        mode: cfg.mode.as_str().into(),
        slice,
        base_seed,
        edge_pixel_fraction: edges.iter().filter(|v| **v).count() as f64 / edges.len() as f64,
        entries,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Everything `run` produced, as written to the top-level report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub training: TrainSummary,
    pub evaluations: Vec<EvalReport>,
    pub uncertainty: Option<UncertaintyReport>,
}

/// Layout of one experiment directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn full_data(&self) -> PathBuf {
        self.root.join("data").join("full")
    }

    pub fn undersampled(&self, af: f64) -> PathBuf {
        self.root.join("data").join(format!("af{af}"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn recon(&self, af: f64) -> PathBuf {
        self.root.join(format!("recon_af{af}"))
    }

    pub fn uncertainty(&self) -> PathBuf {
        self.root.join("uncertainty")
    }
}

/// Phantom, undersampling at every evaluated AF, training at the
/// configured AF, sampling, evaluation and the uncertainty study.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let layout = RunLayout { root: cfg.work_dir.clone() };
    fs::create_dir_all(&layout.root)?;
    cfg.save(&layout.root.join("config.toml"))?;
    write_json(&layout.root.join("seeds.json"), &cfg.seeds())?;
    if !layout.full_data().join("manifest.json").exists() {
        make_phantom(cfg, &layout.full_data())?;
    }
    let mut afs = vec![cfg.mask.af];
    afs.extend(cfg.evaluation.afs.iter().copied().filter(|a| *a != cfg.mask.af));
    for &af in &afs {
        let dir = layout.undersampled(af);
        if !dir.join("manifest.json").exists() {
            undersample(&layout.full_data(), &dir, MaskSpec { af, ..cfg.mask }, cfg.seeds().mask)?;
        }
    }
    let training = train(cfg, &layout.undersampled(cfg.mask.af), &layout.checkpoint())?;
    let mut evaluations = Vec::new();
    for &af in &cfg.evaluation.afs {
        evaluations.push(sample(cfg, &layout.undersampled(af), &layout.checkpoint(), &layout.recon(af))?);
    }
    let uncertainty = if cfg.evaluation.uncertainty_counts.is_empty() {
        None
    } else {
        Some(uncertainty(cfg, &layout.undersampled(cfg.mask.af), &layout.checkpoint(), &layout.uncertainty())?)
    };
    let report = RunReport { mode: cfg.mode.as_str().into(), seed: cfg.seed, training, evaluations, uncertainty };
    write_json(&layout.root.join(REPORT_FILE), &report)?;
    Ok(report)
}
