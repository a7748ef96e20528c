//! Experiment configuration: a TOML file of nested tables, schema-validated
//! before any compute, then resolved into a fully explicit form whose JSON
//! serialization is hashed into every artifact's provenance header.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cauchylab::geometry::{fixtures, DomainSpec, Spacing};
use cauchylab::{AffineCoeff, PiecewiseLinearPotential};

/// Raw file schema. Unknown keys are rejected so typos surface as errors.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub fixture: FixtureSection,
    pub potential: PotentialSection,
    pub potential2: Option<PotentialSection>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSection {
    /// Canonical fixture name: two_half_square, two_half_cube, four_square,
    /// or single_cube.
    pub name: String,
    /// Grid spacing: a float or an exact fraction string like "1/12".
    pub h: HSpec,
}

/// Spacing accepted as a number or a fraction string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum HSpec {
    Num(f64),
    Text(String),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    /// A-priori sup bound E₀ of the class.
    pub e0: f64,
    /// One affine coefficient set per subdomain, in label order.
    pub coeffs: Vec<CoeffSpec>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffSpec {
    pub a: f64,
    /// Gradient components, up to the fixture dimension (missing → 0).
    #[serde(default)]
    pub grad: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Cauchy-space generation count.
    pub m: Option<usize>,
    /// Master seed for every randomized experiment.
    pub seed: Option<u64>,
    /// Sample count for sweep and three-spheres draws.
    pub n_samples: Option<usize>,
    /// Sweep draw box bound (defaults to potential.e0).
    pub e0: Option<f64>,
    /// Reconstruction trial budget.
    pub max_iters: Option<usize>,
    /// Forward datum index (window eigenfunction number).
    pub datum: Option<usize>,
    /// Subdomain chain order for probes (defaults to natural order).
    pub chain: Option<Vec<u8>>,
    /// Chain depth the smallness probe enters at.
    pub depth: Option<usize>,
    /// Probe radii in lattice steps (each ≥ 4).
    pub radii: Option<Vec<i64>>,
    /// Three-spheres ball center.
    pub center: Option<Vec<f64>>,
    /// Three concentric radii for the three-spheres experiment.
    pub spheres: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Artifact directory.
    pub dir: Option<String>,
    /// Stdout summary format: "text" or "json".
    pub format: Option<String>,
}

/// Command-line overrides applied on top of the file before resolution.
#[derive(Debug, Default)]
pub struct Overrides {
    pub h: Option<String>,
    pub m: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub format: Option<String>,
}

/// Fully resolved configuration: every default made explicit. Its JSON
/// serialization (fixed field order) is the provenance payload and the hash
/// preimage.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub fixture: String,
    pub h: String,
    pub dim: usize,
    pub subdomains: usize,
    pub m: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub e0: f64,
    pub max_iters: usize,
    pub datum: usize,
    pub chain: Vec<u8>,
    pub depth: usize,
    pub radii: Vec<i64>,
    pub center: Vec<f64>,
    pub spheres: [f64; 3],
    pub out_dir: String,
    pub format: String,
    pub potential: PotentialSection,
    pub potential2: Option<PotentialSection>,
}

impl ResolvedConfig {
    /// Loads, overrides, validates. Errors name the failing field path.
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("config file {}: {e}", path.display()))?;
        let file: FileConfig =
            toml::from_str(&text).map_err(|e| format!("config parse: {e}"))?;
        resolve(file, ov)
    }

    /// The geometry specification of the named fixture at the resolved h.
    pub fn domain_spec(&self) -> DomainSpec {
        let h = parse_spacing(&self.h).expect("validated");
        match self.fixture.as_str() {
            "two_half_square" => fixtures::two_half_square(h),
            "two_half_cube" => fixtures::two_half_cube(h),
            "four_square" => fixtures::four_square(h),
            "single_cube" => fixtures::single_cube(h),
            _ => unreachable!("validated fixture name"),
        }
    }

    /// First potential as a library object.
    pub fn potential(&self) -> PiecewiseLinearPotential {
        build_potential(&self.potential)
    }

    /// Second potential, when configured.
    pub fn potential2(&self) -> Option<PiecewiseLinearPotential> {
        self.potential2.as_ref().map(build_potential)
    }

    /// 16-hex SHA-256 prefix of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Canonical one-line JSON of the resolved configuration.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn build_potential(p: &PotentialSection) -> PiecewiseLinearPotential {
    let coeffs = p
        .coeffs
        .iter()
        .map(|c| {
            let mut grad = [0.0; 3];
            for (d, g) in c.grad.iter().take(3).enumerate() {
                grad[d] = *g;
            }
            AffineCoeff { a: c.a, grad }
        })
        .collect();
    PiecewiseLinearPotential::new(coeffs, p.e0)
}

/// Subdomain count of each named fixture, for schema-level validation.
fn fixture_shape(name: &str) -> Option<(usize, usize)> {
    match name {
        "two_half_square" => Some((2, 2)),
        "two_half_cube" => Some((3, 2)),
        "four_square" => Some((2, 4)),
        "single_cube" => Some((3, 1)),
        _ => None,
    }
}

fn parse_spacing(text: &str) -> Result<Spacing, String> {
    if text.contains('/') {
        Ok(Spacing::Fraction(text.to_string()))
    } else {
        let v: f64 = text
            .parse()
            .map_err(|_| format!("not a number or fraction: {text}"))?;
        Ok(Spacing::Value(v))
    }
}

/// Canonical text form of a spacing specification.
fn canonical_h(h: &HSpec) -> String {
    match h {
        HSpec::Num(v) => format!("{v}"),
        HSpec::Text(t) => t.trim().to_string(),
    }
}

fn validate_potential(
    section: &PotentialSection,
    path: &str,
    dim: usize,
    nsub: usize,
) -> Result<(), String> {
    if !(section.e0 > 0.0 && section.e0.is_finite()) {
        return Err(format!("{path}.e0: must be a positive finite number"));
    }
    if section.coeffs.len() != nsub {
        return Err(format!(
            "{path}.coeffs: fixture has {nsub} subdomains, got {} coefficient sets",
            section.coeffs.len()
        ));
    }
    for (j, c) in section.coeffs.iter().enumerate() {
        if !c.a.is_finite() {
            return Err(format!("{path}.coeffs[{j}].a: must be finite"));
        }
        if c.grad.len() > dim {
            return Err(format!(
                "{path}.coeffs[{j}].grad: at most {dim} components in dimension {dim}"
            ));
        }
        if c.grad.iter().any(|g| !g.is_finite()) {
            return Err(format!("{path}.coeffs[{j}].grad: must be finite"));
        }
    }
    Ok(())
}

fn resolve(file: FileConfig, ov: &Overrides) -> Result<ResolvedConfig, String> {
    let (dim, nsub) = fixture_shape(&file.fixture.name).ok_or(format!(
        "fixture.name: unknown fixture {:?} (expected two_half_square, two_half_cube, four_square, or single_cube)",
        file.fixture.name
    ))?;

    let h_text = match &ov.h {
        Some(flag) => flag.trim().to_string(),
        None => canonical_h(&file.fixture.h),
    };
    let spacing = parse_spacing(&h_text).map_err(|e| format!("fixture.h: {e}"))?;
    match &spacing {
        Spacing::Value(v) => {
            if !(*v > 0.0 && *v < 1.0) {
                return Err(format!("fixture.h: must lie in (0,1), got {v}"));
            }
        }
        Spacing::Fraction(f) => {
            let parts: Vec<&str> = f.split('/').collect();
            let ok = parts.len() == 2
                && parts[0].trim().parse::<u64>().map(|n| n > 0).unwrap_or(false)
                && parts[1].trim().parse::<u64>().map(|d| d > 0).unwrap_or(false);
            if !ok {
                return Err(format!("fixture.h: malformed fraction {f:?}"));
            }
        }
    }

    validate_potential(&file.potential, "potential", dim, nsub)?;
    if let Some(p2) = &file.potential2 {
        validate_potential(p2, "potential2", dim, nsub)?;
    }

    let m = ov.m.or(file.run.m).unwrap_or(8);
    if m == 0 {
        return Err("run.m: must be at least 1".into());
    }
    let n_samples = file.run.n_samples.unwrap_or(10);
    if n_samples == 0 {
        return Err("run.n_samples: must be at least 1".into());
    }
    let max_iters = file.run.max_iters.unwrap_or(500);
    if max_iters == 0 {
        return Err("run.max_iters: must be at least 1".into());
    }
    let e0 = file.run.e0.unwrap_or(file.potential.e0);
    if !(e0 > 0.0 && e0.is_finite()) {
        return Err("run.e0: must be a positive finite number".into());
    }
    let chain = file
        .run
        .chain
        .unwrap_or_else(|| (1..=nsub as u8).collect());
    if chain.len() != nsub {
        return Err(format!(
            "run.chain: must order all {nsub} subdomains, got {} entries",
            chain.len()
        ));
    }
    if chain.iter().any(|&l| l == 0 || l as usize > nsub) {
        return Err(format!("run.chain: labels must lie in 1..={nsub}"));
    }
    let depth = file.run.depth.unwrap_or(0);
    if depth >= chain.len() {
        return Err(format!(
            "run.depth: must be below the chain length {}",
            chain.len()
        ));
    }
    let radii = file.run.radii.unwrap_or_else(|| vec![4, 5, 6, 7]);
    if radii.is_empty() {
        return Err("run.radii: must list at least one radius".into());
    }
    if radii.iter().any(|&r| r < 4) {
        return Err("run.radii: every radius must be at least 4 lattice steps".into());
    }
    let center = file.run.center.unwrap_or_else(|| {
        let mut c = vec![0.5; dim];
        if dim == 2 {
            c[1] = 0.5;
        }
        c
    });
    if center.len() != dim {
        return Err(format!(
            "run.center: needs {dim} coordinates, got {}",
            center.len()
        ));
    }
    let spheres_v = file
        .run
        .spheres
        .unwrap_or_else(|| vec![0.125, 0.25, 0.4375]);
    if spheres_v.len() != 3 {
        return Err(format!(
            "run.spheres: needs exactly 3 radii, got {}",
            spheres_v.len()
        ));
    }
    let spheres = [spheres_v[0], spheres_v[1], spheres_v[2]];
    if !(spheres[0] > 0.0 && spheres[0] < spheres[1] && spheres[1] < spheres[2]) {
        return Err("run.spheres: radii must be positive and strictly increasing".into());
    }

    let out_dir = ov
        .out
        .clone()
        .or(file.output.dir)
        .unwrap_or_else(|| "out".into());
    let format = ov
        .format
        .clone()
        .or(file.output.format)
        .unwrap_or_else(|| "text".into());
    if format != "text" && format != "json" {
        return Err(format!(
            "output.format: expected \"text\" or \"json\", got {format:?}"
        ));
    }

    Ok(ResolvedConfig {
        fixture: file.fixture.name,
        h: h_text,
        dim,
        subdomains: nsub,
        m,
        seed: ov.seed.or(file.run.seed).unwrap_or(1),
        n_samples,
        e0,
        max_iters,
        datum: file.run.datum.unwrap_or(0),
        chain,
        depth,
        radii,
        center,
        spheres,
        out_dir,
        format,
        potential: file.potential,
        potential2: file.potential2,
    })
}
