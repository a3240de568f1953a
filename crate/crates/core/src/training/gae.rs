/// GAE(λ) over a time-major `[steps, envs]` batch.
///
/// `dones[t * envs + e]` marks an episode that ended at step `t`; its
/// successor value is not bootstrapped. `last_values` are critic estimates
/// for the states after the final step, used where the horizon truncates an
/// unfinished episode. Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_values: &[f64],
    discount: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let envs = last_values.len();
    assert!(envs > 0 && rewards.len().is_multiple_of(envs), "rewards must be [steps, envs]");
    assert_eq!(rewards.len(), values.len());
    assert_eq!(rewards.len(), dones.len());
    let steps = rewards.len() / envs;
    let mut adv = vec![0.0; rewards.len()];
    for (e, &last) in last_values.iter().enumerate() {
        let mut running = 0.0;
        for t in (0..steps).rev() {
            let i = t * envs + e;
            let (next_value, cont) = if dones[i] {
                (0.0, 0.0)
            } else if t + 1 == steps {
                (last, 1.0)
            } else {
                (values[i + envs], 1.0)
            };
            let delta = rewards[i] + discount * next_value * cont - values[i];
            running = delta + discount * lambda * cont * running;
            adv[i] = running;
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for x in xs {
        *x = (*x - mean) / std;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monte_carlo_limit_is_reward_to_go() {
        let rewards = [1.0, 2.0, 3.0, 4.0];
        let (adv, _) = compute_gae(&rewards, &[0.0; 4], &[false, false, false, true], &[0.0], 1.0, 1.0);
        assert_eq!(adv, vec![10.0, 9.0, 7.0, 4.0]);
    }

    #[test]
    fn zero_lambda_is_one_step_td() {
        let rewards = [0.5, -1.0, 2.0];
        let values = [0.3, 0.1, -0.4];
        let (adv, ret) = compute_gae(&rewards, &values, &[false; 3], &[0.7], 0.9, 0.0);
        let want = [0.5 + 0.9 * 0.1 - 0.3, -1.0 + 0.9 * -0.4 - 0.1, 2.0 + 0.9 * 0.7 + 0.4];
        for i in 0..3 {
            assert!((adv[i] - want[i]).abs() < 1e-12);
            assert!((ret[i] - (want[i] + values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn envs_are_independent() {
        // two envs interleaved time-major; env 1 terminates at t = 0
        let rewards = [1.0, 5.0, 1.0, 7.0];
        let values = [0.0; 4];
        let (adv, _) = compute_gae(&rewards, &values, &[false, true, false, false], &[0.0, 0.0], 1.0, 1.0);
        assert_eq!(adv, vec![2.0, 5.0, 1.0, 7.0]);
    }

    #[test]
    fn normalized_moments() {
        let mut xs: Vec<f64> = (0..100).map(|i| (i as f64).sin() * 3.0 + 2.0).collect();
        normalize(&mut xs);
        let mean = xs.iter().sum::<f64>() / 100.0;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(mean.abs() <= 1e-6 && (std - 1.0).abs() <= 1e-3);
    }
}
