use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{ObjectSpec, SimError};
use crate::rng::Rng;

/// Objects that break below this force form the delicate stratum, N.
pub const DELICATE_CRUSH_FORCE: f64 = 3.0;

const MIN_MASS: f64 = 0.001;
const MAX_MASS: f64 = 0.5;
const GRAVITY: f64 = 9.81;

pub fn is_delicate(spec: &ObjectSpec) -> bool {
    spec.crush_force < DELICATE_CRUSH_FORCE
}

/// Smallest squeeze force that lets friction carry the object's weight.
pub fn minimal_holding_force(mass: f64, mu: f64, gravity: f64, contacts: f64) -> f64 {
    mass * gravity / (contacts * mu)
}

#[allow(clippy::too_many_arguments)]
fn object(
    name: &str,
    mass: f64,
    rest_width: f64,
    friction_mu: f64,
    stiffness_k: f64,
    crush_force: f64,
    yield_force: f64,
    plasticity: f64,
    seen: bool,
) -> ObjectSpec {
    ObjectSpec {
        name: name.to_string(),
        rest_width,
        mass,
        friction_mu,
        stiffness_k,
        crush_force,
        yield_force,
        plasticity,
        seen,
    }
}

/// The ten evaluation objects: four that also appear in demonstrations,
/// six withheld.
pub fn eval_catalog() -> Vec<ObjectSpec> {
    vec![
        object(
            "empty paper cup",
            0.010,
            60.0,
            0.5,
            0.05,
            2.5,
            0.8,
            0.5,
            true,
        ),
        object("raspberry", 0.005, 22.0, 0.6, 0.15, 1.8, 0.6, 0.6, true),
        object("tomato", 0.120, 55.0, 0.5, 0.25, 8.0, 1.6, 0.3, true),
        object(
            "paper cup with water",
            0.250,
            62.0,
            0.7,
            0.12,
            4.5,
            2.8,
            0.3,
            true,
        ),
        object("blackberry", 0.006, 24.0, 0.6, 0.12, 1.6, 0.5, 0.6, false),
        object("egg", 0.060, 45.0, 0.35, 2.0, 2.9, 2.9, 0.0, false),
        object(
            "empty metal can",
            0.015,
            65.0,
            0.4,
            0.4,
            12.0,
            4.0,
            0.3,
            false,
        ),
        object(
            "empty soft-shelled taco",
            0.030,
            40.0,
            0.6,
            0.06,
            2.2,
            0.7,
            0.5,
            false,
        ),
        object("pepper", 0.150, 60.0, 0.6, 0.2, 9.0, 1.7, 0.35, false),
        object("potato chip", 0.002, 10.0, 0.5, 1.0, 1.5, 1.5, 0.0, false),
    ]
}

/// Demonstration object names, flagged when the real item is fragile.
const NAME_POOL: &[(&str, bool)] = &[
    ("orange bottle", false),
    ("peeled garlic clove", true),
    ("stuffed animal", false),
    ("garlic clove", true),
    ("green block", false),
    ("red screwdriver handle", false),
    ("scallion stalk", true),
    ("small avocado", true),
    ("yellow ducky", false),
    ("water bottle", false),
    ("small black motor", false),
    ("circuit board", false),
    ("red button", false),
    ("orange noodle bag", true),
    ("yellow block", false),
    ("strawberry", true),
    ("bottle cap", false),
    ("small suction cup", false),
    ("light green chip", true),
    ("ziptie bag", false),
    ("metal lock", false),
    ("cardboard box", false),
    ("large bearing", false),
    ("small red green apple", false),
    ("paper airplane", true),
    ("green circuit board", false),
    ("plastic bottle", false),
    ("cherry tomato", true),
    ("mushroom", true),
    ("garlic bulb", false),
];

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Demonstration catalog of `n` objects.
///
/// The seen evaluation objects come first (up to `n`), followed by generated
/// objects whose masses are stratified log-uniform over 1 g to 500 g. About
/// 40% of the generated objects are delicate; these get the lightest masses
/// so a slip-safe grasp stays below their crush force.
pub fn sample_object_catalog(n: usize, rng: &mut Rng) -> Result<Vec<ObjectSpec>, SimError> {
    if n == 0 {
        return Err(SimError::EmptyCatalog);
    }
    let mut catalog: Vec<ObjectSpec> = eval_catalog()
        .into_iter()
        .filter(|o| o.seen)
        .take(n)
        .collect();
    let generated = n - catalog.len();
    if generated == 0 {
        return Ok(catalog);
    }

    let mut pool: Vec<(String, bool)> = Vec::with_capacity(generated);
    let mut round = 0;
    while pool.len() < generated {
        let mut names: Vec<(String, bool)> = NAME_POOL
            .iter()
            .map(|&(name, fragile)| {
                let name = if round == 0 {
                    name.to_string()
                } else {
                    format!("{name} {}", round + 1)
                };
                (name, fragile)
            })
            .collect();
        names.shuffle(rng);
        pool.extend(names);
        round += 1;
    }
    pool.truncate(generated);
    // fragile names first; they receive the lightest masses
    pool.sort_by_key(|(_, fragile)| !*fragile);

    let n_delicate = (generated as f64 * 0.4).ceil() as usize;
    for (j, (name, _)) in pool.into_iter().enumerate() {
        let u = (j as f64 + rng.random::<f64>()) / generated as f64;
        let mass = (MIN_MASS.ln() + u * (MAX_MASS.ln() - MIN_MASS.ln())).exp();
        let spec = if j < n_delicate {
            let mu = uniform(rng, 0.4, 0.9);
            let hold = 1.2 * minimal_holding_force(mass, mu, GRAVITY, 2.0);
            let crush = uniform(rng, (2.0 * hold.max(0.15) + 0.3).max(1.0), 2.9);
            let yield_force = (crush * uniform(rng, 0.3, 0.6)).max(1.3 * hold).min(crush);
            ObjectSpec {
                name,
                rest_width: uniform(rng, 8.0, 60.0),
                mass,
                friction_mu: mu,
                stiffness_k: log_uniform(rng, 0.05, 1.0),
                crush_force: crush,
                yield_force,
                plasticity: uniform(rng, 0.3, 0.7),
                seen: true,
            }
        } else {
            let mu = uniform(rng, 0.4, 1.0);
            let hold = 1.2 * minimal_holding_force(mass, mu, GRAVITY, 2.0);
            let crush = uniform(rng, 4.0, 20.0).max(2.0 * hold + 1.0);
            let yield_force = (crush * uniform(rng, 0.4, 0.8)).max(1.3 * hold).min(crush);
            ObjectSpec {
                name,
                rest_width: uniform(rng, 5.0, 65.0),
                mass,
                friction_mu: mu,
                stiffness_k: log_uniform(rng, 0.1, 2.0),
                crush_force: crush,
                yield_force,
                plasticity: uniform(rng, 0.0, 0.4),
                seen: true,
            }
        };
        catalog.push(spec);
    }
    Ok(catalog)
}
