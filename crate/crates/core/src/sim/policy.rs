use crate::dataset::SiteDataset;
use crate::error::{Error, Result};
use crate::local::PropensityModel;
use crate::CateEstimator;

/// Inverse-propensity estimate of the mean outcome under the rule
/// "treat when `tau_hat(x) > 0`", normalised by the summed weights.
///
/// Only subjects whose received arm agrees with the rule contribute, each
/// with weight `1 / pi`, where `pi` is the clipped probability of the arm
/// they received.
pub fn policy_value(data: &SiteDataset, tau_hat: &dyn CateEstimator, prop: &PropensityModel) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (y, z, x) in data.rows() {
        let rule = tau_hat.estimate(x)? > 0.0;
        if rule == z {
            let w = 1.0 / prop.arm_probability(z, x);
            num += y * w;
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(Error::DegenerateEstimand(
            "no subject received the arm the rule recommends".into(),
        ));
    }
    Ok(num / den)
}
