use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mpmrestore::baselines::{chi_sweep, log_grid, richardson_lucy, write_sweep_csv};
use mpmrestore::beads::write_regions_csv;
use mpmrestore::calibrate::{calibrate, locate_beads};
use mpmrestore::io::{read_volume, write_volume};
use mpmrestore::noise::{estimate_noise_with, NoiseParams};
use mpmrestore::pmms::{pmms_run, RestorationProblem};
use mpmrestore::{snr_db, Kernel3D, Volume3D};

use crate::config::PipelineConfig;
use crate::error::CliError;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Reads an input volume; a missing file is reported as a configuration error.
pub fn input_volume(path: &Path, what: &str) -> Result<Volume3D, CliError> {
    let (raw, side) = mpmrestore::io::volume_paths(path);
    if !raw.exists() && !side.exists() {
        return Err(CliError::Config(format!("{what} volume {} not found", path.display())));
    }
    Ok(read_volume(path)?)
}

fn input_kernel(path: &Path) -> Result<Kernel3D, CliError> {
    let mut k = Kernel3D::new(input_volume(path, "PSF")?);
    k.normalize()?;
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Single bead with a generalized-exponential kernel.
    Bead,
    /// Piecewise-smooth phantom with Gaussian blur and heteroscedastic noise.
    Restoration,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    preset: Preset,
    seed: u64,
    config: &'a PipelineConfig,
    files: Vec<String>,
    snr_db: f64,
}

pub fn simulate(cfg: &PipelineConfig, preset: Preset, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let (pairs, snr): (Vec<(&str, Volume3D)>, f64) = match preset {
        Preset::Bead => {
            let d = cfg.bead.simulate(cfg.seed)?;
            let snr = snr_db(&d.clean, &d.noisy)?;
            (vec![("bead", d.bead), ("kernel", d.kernel.into()), ("clean", d.clean), ("observed", d.noisy)], snr)
        }
        Preset::Restoration => {
            let d = cfg.restoration_setup.simulate(cfg.seed)?;
            let snr = snr_db(&d.truth, &d.degraded)?;
            (vec![("truth", d.truth), ("kernel", d.kernel.into()), ("observed", d.degraded)], snr)
        }
    };
    let mut files = Vec::new();
    for (name, vol) in &pairs {
        write_volume(vol, &out.join(name))?;
        files.push(format!("{name}.{}", mpmrestore::io::RAW_EXT));
    }
    let manifest = Manifest { preset, seed: cfg.seed, config: cfg, files, snr_db: snr };
    let path = out.join("manifest.json");
    serde_json::to_writer_pretty(create(&path)?, &manifest).map_err(|e| CliError::io(&path, e.into()))?;
    log::info!("simulated {preset:?} data in {} (SNR {snr:.2} dB)", out.display());
    Ok(())
}

pub fn extract_beads(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    let y = input_volume(input, "input")?;
    let regions = locate_beads(&y, &cfg.calibration.extract)?;
    if regions.is_empty() {
        return Err(mpmrestore::Error::NoRegions.into());
    }
    write_regions_csv(&regions, create(out)?)?;
    log::info!("{} bead regions written to {}", regions.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AverageRow {
    alpha: f64,
    beta: f64,
    fwhm_x_um: f64,
    fwhm_y_um: f64,
    fwhm_z_um: f64,
    theta: f64,
    phi: f64,
    psi: f64,
}

pub fn estimate_psf(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    let y = input_volume(input, "input")?;
    let cal = calibrate(&y, &cfg.calibration)?;
    cal.write_report_csv(create(&out.join("beads.csv"))?)?;
    let e = cal.average_euler;
    let fw = e.fwhm()?;
    let row = AverageRow {
        alpha: cal.average.alpha,
        beta: cal.average.beta,
        fwhm_x_um: fw[0],
        fwhm_y_um: fw[1],
        fwhm_z_um: fw[2],
        theta: e.theta,
        phi: e.phi,
        psi: e.psi,
    };
    let mut w = csv::Writer::from_writer(create(&out.join("average.csv"))?);
    w.serialize(row).map_err(mpmrestore::Error::from)?;
    w.flush().map_err(|e| CliError::io(&out.join("average.csv"), e))?;
    write_volume(cal.kernel.volume(), &out.join("psf"))?;
    log::info!("fitted {} beads; averaged kernel written to {}", cal.fits.len(), out.join("psf").display());
    Ok(())
}

pub fn estimate_noise(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<NoiseParams, CliError> {
    let y = input_volume(input, "input")?;
    let est = estimate_noise_with(&y, &cfg.noise)?;
    est.write_csv(create(out)?)?;
    log::info!("noise a = {:.4e}, b = {:.4e}, R² = {:.3}", est.params.a, est.params.b, est.r2);
    Ok(est.params)
}

/// Reads `(a, b)` back from a noise CSV written by `estimate-noise`.
pub fn read_noise_csv(path: &Path) -> Result<NoiseParams, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read noise file {}: {e}", path.display())))?;
    let mut lines = text.lines();
    while let Some(l) = lines.next() {
        if l.trim().trim_end_matches(',') == "a,b,r2" {
            let vals = lines.next().ok_or_else(|| CliError::Config("noise file ends after the a,b,r2 header".into()))?;
            let v: Vec<f64> = vals.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| CliError::Config(format!("bad noise values: {e}")))?;
            if v.len() < 2 {
                return Err(CliError::Config("noise row needs a and b".into()));
            }
            return Ok(NoiseParams::new(v[0], v[1])?);
        }
    }
    Err(CliError::Config(format!("no a,b,r2 section in {}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    /// Constrained TV restoration with the penalty MM solver.
    Pmms,
    /// Richardson-Lucy.
    Rl,
}

pub struct RestoreArgs {
    pub input: PathBuf,
    pub psf: PathBuf,
    pub noise: Option<NoiseParams>,
    pub alpha: f64,
    pub method: Method,
    pub out: PathBuf,
}

pub fn restore(cfg: &PipelineConfig, a: &RestoreArgs) -> Result<(), CliError> {
    ensure_dir(&a.out)?;
    let y = input_volume(&a.input, "input")?;
    let h = input_kernel(&a.psf)?;
    let x = match a.method {
        Method::Rl => richardson_lucy(&y.map(|v| v - a.alpha), &h, cfg.baselines.rl_iters, cfg.restoration.padding)?,
        Method::Pmms => {
            let noise = match a.noise {
                Some(n) => n,
                None => estimate_noise_with(&y, &cfg.noise)?.params,
            };
            let prob = RestorationProblem::with_noise_model(y.clone(), &h, a.alpha, noise, &cfg.restoration)?;
            let run = pmms_run(&prob, &cfg.schedule, &y)?;
            run.write_log_csv(create(&a.out.join("log.csv"))?)?;
            log::info!("constraint excess {:.3e}", run.constraint_excess(&prob)?);
            run.x
        }
    };
    write_volume(&x, &a.out.join("restored"))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub snr_db: f64,
    pub prd_percent: f64,
    pub rmse: f64,
}

pub fn evaluate(reference: &Path, test: &Path, out: Option<&Path>) -> Result<MetricsRow, CliError> {
    let r = input_volume(reference, "reference")?;
    let t = input_volume(test, "test")?;
    r.ensure_same_dims(&t)?;
    let err: f64 = r.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let row = MetricsRow { snr_db: snr_db(&r, &t)?, prd_percent: 100.0 * (err / r.norm_sq()).sqrt(), rmse: (err / r.len() as f64).sqrt() };
    let write = |w: Box<dyn std::io::Write>| -> Result<(), CliError> {
        let mut c = csv::Writer::from_writer(w);
        c.serialize(&row).map_err(mpmrestore::Error::from)?;
        c.flush().map_err(|e| CliError::io(Path::new("<metrics>"), e))
    };
    match out {
        Some(p) => write(Box::new(create(p)?))?,
        None => write(Box::new(std::io::stdout()))?,
    }
    Ok(row)
}

pub fn sweep_chi(cfg: &PipelineConfig, input: &Path, truth: &Path, psf: &Path, alpha: f64, out: &Path) -> Result<(), CliError> {
    let y = input_volume(input, "input")?;
    let t = input_volume(truth, "truth")?;
    let h = input_kernel(psf)?;
    let [lo, hi] = cfg.baselines.chi_range;
    let chis = log_grid(lo, hi, cfg.baselines.chi_points)?;
    let rows = chi_sweep(&y, &t, &h, alpha, &chis, &cfg.baselines.penalized)?;
    write_sweep_csv(&rows, create(out)?)?;
    Ok(())
}
