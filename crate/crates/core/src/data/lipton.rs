//! Synthetic hiring data in the style of Lipton et al.: hair length and work
//! experience both depend on gender, the hiring decision only on experience.

use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use super::{AttributeSpec, Column, DataError, Dataset, Role};

/// Gender-conditional Gaussian parameters and the hiring threshold.
///
/// Index 0 is the privileged group, index 1 the protected one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiptonCalibration {
    pub hair_mean: [f64; 2],
    pub hair_sd: f64,
    pub experience_mean: [f64; 2],
    pub experience_sd: f64,
    pub hire_threshold: f64,
}

/// Frozen output of [`LiptonCalibration::solve`] for the default targets
/// (overall hiring rate 0.3425, privileged hiring rate 0.27, balanced groups).
pub const LIPTON: LiptonCalibration = LiptonCalibration {
    hair_mean: [22.4, 12.0],
    hair_sd: 6.0,
    experience_mean: [6.935_935_044_916_864, 8.926_492_159_991_279],
    experience_sd: 5.0,
    hire_threshold: 10.0,
};

impl LiptonCalibration {
    /// Places each group's experience mean so that exactly the requested
    /// fraction lies above the threshold. With balanced groups the protected
    /// rate is `2 * overall - privileged`.
    pub fn solve(overall_rate: f64, privileged_rate: f64) -> Self {
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let protected_rate = 2.0 * overall_rate - privileged_rate;
        let threshold = 10.0;
        let sd = 5.0;
        let mean_for = |rate: f64| threshold - sd * std_normal.inverse_cdf(1.0 - rate);
        Self {
            hair_mean: [22.4, 12.0],
            hair_sd: 6.0,
            experience_mean: [mean_for(privileged_rate), mean_for(protected_rate)],
            experience_sd: sd,
            hire_threshold: threshold,
        }
    }
}

/// Generates `n` rows, half per gender.
///
/// Each attribute is drawn by stratified inverse-CDF sampling inside its
/// group, so group-level hiring rates sit within one row of their targets
/// for every seed. Values are clamped at zero.
pub fn generate_lipton(n: usize, seed: u64) -> Result<Dataset, DataError> {
    generate_with(n, seed, &LIPTON)
}

pub(crate) fn generate_with(
    n: usize,
    seed: u64,
    cal: &LiptonCalibration,
) -> Result<Dataset, DataError> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(DataError::InvalidArgument(format!(
            "Lipton size must be even and at least 2, got {n}"
        )));
    }
    let mut rng = crate::rng::seeded(seed);
    let per_group = n / 2;
    let mut hair = Vec::with_capacity(n);
    let mut experience = Vec::with_capacity(n);
    let mut gender = Vec::with_capacity(n);
    for g in 0..2 {
        let h = stratified_normal(&mut rng, per_group, cal.hair_mean[g], cal.hair_sd);
        let e = stratified_normal(
            &mut rng,
            per_group,
            cal.experience_mean[g],
            cal.experience_sd,
        );
        hair.extend(h.into_iter().map(|x| x.max(0.0)));
        experience.extend(e.into_iter().map(|x| x.max(0.0)));
        gender.extend(std::iter::repeat_n(g, per_group));
    }
    // Interleave the groups so row order carries no group information.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let hired: Vec<usize> = order
        .iter()
        .map(|&i| usize::from(experience[i] > cal.hire_threshold))
        .collect();
    let schema = vec![
        AttributeSpec::numeric("hair_length"),
        AttributeSpec::numeric("work_experience"),
        AttributeSpec::categorical("gender", &["g1", "g2"]).with_role(Role::Sensitive),
        AttributeSpec::categorical("hired", &["no", "yes"]).with_role(Role::Decision),
    ];
    let columns = vec![
        Column::Numeric(order.iter().map(|&i| hair[i]).collect()),
        Column::Numeric(order.iter().map(|&i| experience[i]).collect()),
        Column::Categorical(order.iter().map(|&i| gender[i]).collect()),
        Column::Categorical(hired),
    ];
    Dataset::new(schema, columns)
}

fn stratified_normal<R: Rng>(rng: &mut R, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    let dist = Normal::new(mean, sd).expect("positive sd");
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(rng);
    strata
        .into_iter()
        .map(|s| {
            let u: f64 = rng.random();
            let p = ((s as f64 + u) / n as f64).clamp(1e-12, 1.0 - 1e-12);
            dist.inverse_cdf(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_constants_match_calibration() {
        let solved = LiptonCalibration::solve(0.3425, 0.27);
        for g in 0..2 {
            assert!((solved.experience_mean[g] - LIPTON.experience_mean[g]).abs() < 1e-9);
        }
        assert_eq!(solved.hair_mean, LIPTON.hair_mean);
        assert_eq!(solved.hire_threshold, LIPTON.hire_threshold);
    }

    #[test]
    fn rejects_odd_or_tiny_sizes() {
        assert!(generate_lipton(3, 0).is_err());
        assert!(generate_lipton(0, 0).is_err());
        assert!(generate_lipton(2, 0).is_ok());
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate_lipton(200, 9).unwrap(), generate_lipton(200, 9).unwrap());
        assert_ne!(generate_lipton(200, 9).unwrap(), generate_lipton(200, 10).unwrap());
    }
}
