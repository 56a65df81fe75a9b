//! Finite-difference validation of every graph op and of the full desk-sized
//! models at 64-bit precision.

use cvaegan_tensor::gradcheck::{check_all_ops, check_store, GradCheckConfig, GradCheckReport};
use cvaegan_tensor::{normal_tensor, Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cgan::{d_loss, g_loss, Discriminator, Generator, Stage2Config};
use crate::cvae::{Cvae, CvaeConfig};
use crate::data::EMBED_DIM;
use crate::error::Result;
use crate::profile::Profile;

/// Batch used for the model checks; above 2 so batch statistics are not
/// degenerate.
const BATCH: usize = 3;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub seed: u64,
    pub name: String,
    pub config: GradCheckConfig,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.passed(&self.config)
    }
}

/// Smaller than the op-level step so perturbations rarely push a ReLU input
/// across zero somewhere in the network.
pub const MODEL_STEP: f64 = 1e-6;

/// Coordinates sampled per parameter tensor in the model checks.
pub const MODEL_COORDS: usize = 6;

fn model_cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        max_coords: MODEL_COORDS,
        step: MODEL_STEP,
        ..Default::default()
    }
}

/// Every stage-1 output (reconstruction and both Gaussian heads) under a
/// random projection, with respect to every parameter. The summed training
/// loss is large enough that its finite differences drown in rounding.
pub fn check_cvae(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Cvae::<f64>::new(CvaeConfig::desk(EMBED_DIM), &mut rng)?;
    let x = normal_tensor::<f64, _>([BATCH, 3, 16, 16], 0.5, &mut rng);
    let phi = normal_tensor::<f64, _>([BATCH, EMBED_DIM], 0.5, &mut rng);
    let eps_c = normal_tensor::<f64, _>([BATCH, model.config.cond_dim], 1.0, &mut rng);
    let eps_z = normal_tensor::<f64, _>([BATCH, model.config.latent_dim], 1.0, &mut rng);
    let parts = model.clone();
    let report = check_store(
        &mut model.store,
        |g, store| {
            let mut m = parts.clone();
            m.store = store.bound_copy();
            let xv = g.constant(x.clone());
            let pv = g.constant(phi.clone());
            let f = m.forward(g, xv, pv, eps_c.clone(), eps_z.clone(), Mode::TRAIN)
                .map_err(into_tensor)?;
            let x_hat = g.flatten(f.x_hat)?;
            g.concat(&[x_hat, f.enc.mu, f.enc.log_var, f.cond.mu, f.cond.log_var])
        },
        &model_cfg(seed),
    )?;
    Ok(report)
}

fn into_tensor(e: crate::Error) -> cvaegan_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => cvaegan_tensor::TensorError::Contract(other.to_string()),
    }
}

struct Stage2Fixture {
    gen: Generator<f64>,
    disc: Discriminator<f64>,
    s0: Tensor<f64>,
    c_hat: Tensor<f64>,
    phi: Tensor<f64>,
    real: Tensor<f64>,
    fake: Tensor<f64>,
}

fn stage2_fixture(seed: u64) -> Result<Stage2Fixture> {
    let arch = Stage2Config::for_profile(Profile::Desk, 16, EMBED_DIM, 128)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = Generator::new(arch.generator, &mut rng);
    let disc = Discriminator::new(arch.discriminator, &mut rng);
    Ok(Stage2Fixture {
        gen,
        disc,
        s0: normal_tensor([BATCH, 3, 16, 16], 0.5, &mut rng),
        c_hat: normal_tensor([BATCH, 128], 1.0, &mut rng),
        phi: normal_tensor([BATCH, EMBED_DIM], 0.5, &mut rng),
        real: normal_tensor([BATCH, 3, 64, 64], 0.5, &mut rng),
        fake: normal_tensor([BATCH, 3, 64, 64], 0.5, &mut rng),
    })
}

/// Generator objective through a frozen discriminator, with respect to the
/// generator parameters.
pub fn check_generator(seed: u64) -> Result<GradCheckReport> {
    let mut fx = stage2_fixture(seed)?;
    let parts = fx.gen.clone();
    let disc = &fx.disc;
    let report = check_store(
        &mut fx.gen.store,
        |g, store| {
            let mut gen = parts.clone();
            gen.store = store.bound_copy();
            let s0 = g.constant(fx.s0.clone());
            let c = g.constant(fx.c_hat.clone());
            let phi = g.constant(fx.phi.clone());
            let out = gen.forward(g, s0, c, Mode::TRAIN).map_err(into_tensor)?;
            let d = disc.forward(g, out, phi, Mode::FROZEN).map_err(into_tensor)?;
            let kl = g.constant(Tensor::scalar(0.25));
            g_loss(g, d.prob, kl, 1.0).map_err(into_tensor)
        },
        &model_cfg(seed),
    )?;
    Ok(report)
}

/// Negated discriminator objective on fixed real and fake images, with
/// respect to the discriminator parameters.
pub fn check_discriminator(seed: u64) -> Result<GradCheckReport> {
    let mut fx = stage2_fixture(seed)?;
    let parts = fx.disc.clone();
    let report = check_store(
        &mut fx.disc.store,
        |g, store| {
            let mut disc = parts.clone();
            disc.store = store.bound_copy();
            let real = g.constant(fx.real.clone());
            let fake = g.constant(fx.fake.clone());
            let phi = g.constant(fx.phi.clone());
            let dr = disc.forward(g, real, phi, Mode::TRAIN).map_err(into_tensor)?;
            let df = disc.forward(g, fake, phi, Mode::TRAIN).map_err(into_tensor)?;
            let l = d_loss(g, dr.prob, df.prob).map_err(into_tensor)?;
            g.scale(l, -1.0)
        },
        &model_cfg(seed),
    )?;
    Ok(report)
}

/// Every op, the stage-1 model, the generator and the discriminator, for
/// seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        let cfg = GradCheckConfig {
            seed,
            ..Default::default()
        };
        for (name, report) in check_all_ops(&cfg)? {
            out.push(SuiteResult {
                seed,
                name: format!("op/{name}"),
                config: GradCheckConfig {
                    max_coords: 64,
                    ..cfg
                },
                report,
            });
        }
        let models: [(&str, fn(u64) -> Result<GradCheckReport>); 3] = [
            ("model/cvae", check_cvae),
            ("model/generator", check_generator),
            ("model/discriminator", check_discriminator),
        ];
        for (name, check) in models {
            out.push(SuiteResult {
                seed,
                name: name.to_string(),
                config: model_cfg(seed),
                report: check(seed)?,
            });
        }
    }
    Ok(out)
}

