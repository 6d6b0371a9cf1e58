//! Transmission model of the cell: path loss, OFDMA uplink and broadcast
//! downlink rates, per-link delays and the per-round completion time.
//!
//! All quantities are linear SI units. The noise density is configured in
//! dBm/Hz and converted once with [`dbm_per_hz_to_watts`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical and system parameters of the cell plus the user geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_users: usize,
    /// Meters.
    pub cell_radius: f64,
    pub pathloss_exponent: f64,
    /// User transmit power, watts.
    pub tx_power_user: f64,
    /// Base station transmit power, watts.
    pub tx_power_bs: f64,
    /// Bandwidth of one uplink resource block, Hz.
    pub rb_bandwidth: f64,
    /// Downlink broadcast bandwidth, Hz.
    pub dl_bandwidth: f64,
    /// Noise power spectral density, W/Hz.
    pub noise_psd: f64,
    pub num_rbs: usize,
    /// Exogenous interference on each RB, watts.
    pub interference: Vec<f64>,
    /// Size of one model upload or broadcast, bits.
    pub model_size_bits: f64,
    /// Distance of every user to the base station, meters.
    pub user_distances: Vec<f64>,
}

/// Converts a noise density in dBm/Hz to W/Hz.
pub fn dbm_per_hz_to_watts(dbm_per_hz: f64) -> f64 {
    10f64.powf((dbm_per_hz - 30.0) / 10.0)
}

impl NetworkConfig {
    /// Default system parameters (α = 2, P = P_B = 1 W, B = 1 MHz,
    /// B_D = 20 MHz, N0 = -174 dBm/Hz, R = 5, no interference) for the given
    /// user distances and model payload.
    pub fn with_defaults(user_distances: Vec<f64>, model_size_bits: f64) -> Self {
        let num_rbs = 5;
        NetworkConfig {
            num_users: user_distances.len(),
            cell_radius: 500.0,
            pathloss_exponent: 2.0,
            tx_power_user: 1.0,
            tx_power_bs: 1.0,
            rb_bandwidth: 1e6,
            dl_bandwidth: 20e6,
            noise_psd: dbm_per_hz_to_watts(-174.0),
            num_rbs,
            interference: vec![0.0; num_rbs],
            model_size_bits,
            user_distances,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cell_radius", self.cell_radius),
            ("pathloss_exponent", self.pathloss_exponent),
            ("tx_power_user", self.tx_power_user),
            ("tx_power_bs", self.tx_power_bs),
            ("rb_bandwidth", self.rb_bandwidth),
            ("dl_bandwidth", self.dl_bandwidth),
            ("noise_psd", self.noise_psd),
            ("model_size_bits", self.model_size_bits),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {value}")));
            }
        }
        if self.num_users == 0 {
            return Err(Error::Config("num_users must be at least 1".into()));
        }
        if self.num_rbs == 0 {
            return Err(Error::Config("num_rbs must be at least 1".into()));
        }
        if self.user_distances.len() != self.num_users {
            return Err(Error::Config(format!(
                "{} user distances for {} users",
                self.user_distances.len(),
                self.num_users
            )));
        }
        if let Some(d) = self.user_distances.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::Config(format!("user distance must be positive, got {d}")));
        }
        if self.interference.len() != self.num_rbs {
            return Err(Error::Config(format!(
                "{} interference values for {} RBs",
                self.interference.len(),
                self.num_rbs
            )));
        }
        if let Some(i) = self.interference.iter().find(|i| !(i.is_finite() && **i >= 0.0)) {
            return Err(Error::Config(format!("interference must be non-negative, got {i}")));
        }
        Ok(())
    }

    /// User indices ordered by distance, ties broken by index.
    pub fn users_by_distance(&self) -> Vec<usize> {
        rank_by_distance(&self.user_distances)
    }

    fn gain(&self, user: usize) -> Result<f64> {
        let d = *self
            .user_distances
            .get(user)
            .ok_or_else(|| Error::Contract(format!("user {user} out of range")))?;
        channel_gain(d, self.pathloss_exponent)
    }

    /// Rate of `user` on RB `rb` alone, bits/s.
    pub fn rb_rate(&self, user: usize, rb: usize) -> Result<f64> {
        let interference = *self
            .interference
            .get(rb)
            .ok_or_else(|| Error::Contract(format!("RB {rb} out of range")))?;
        let snr = self.tx_power_user * self.gain(user)? / (interference + self.rb_bandwidth * self.noise_psd);
        Ok(self.rb_bandwidth * (1.0 + snr).log2())
    }
}

pub(crate) fn rank_by_distance(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// Path gain `distance^-alpha`.
pub fn channel_gain(distance: f64, alpha: f64) -> Result<f64> {
    if !(distance.is_finite() && distance > 0.0) {
        return Err(Error::Domain(format!("distance must be positive, got {distance}")));
    }
    Ok(distance.powf(-alpha))
}

/// Uplink rate of `user` for a 0/1 RB vector; zero when no RB is set.
pub fn uplink_rate(rb_vec: &[bool], config: &NetworkConfig, user: usize) -> Result<f64> {
    if rb_vec.len() != config.num_rbs {
        return Err(Error::Contract(format!(
            "RB vector has length {}, expected {}",
            rb_vec.len(),
            config.num_rbs
        )));
    }
    if rb_vec.iter().filter(|&&r| r).count() > 1 {
        return Err(Error::Contract("a user can occupy at most one RB".into()));
    }
    let mut rate = 0.0;
    for (n, _) in rb_vec.iter().enumerate().filter(|(_, &r)| r) {
        rate += config.rb_rate(user, n)?;
    }
    Ok(rate)
}

/// Downlink broadcast rate towards `user`, bits/s.
pub fn downlink_rate(config: &NetworkConfig, user: usize) -> Result<f64> {
    let snr = config.tx_power_bs * config.gain(user)? / (config.dl_bandwidth * config.noise_psd);
    Ok(config.dl_bandwidth * (1.0 + snr).log2())
}

/// Per-link transmission delays, seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkDelays {
    /// `uplink_per_rb[i][n]`: upload time of user `i` on RB `n`.
    pub uplink_per_rb: Vec<Vec<f64>>,
    /// Broadcast time towards each user.
    pub downlink: Vec<f64>,
}

impl LinkDelays {
    /// Uplink plus downlink delay of `user` on `rb`.
    pub fn total(&self, user: usize, rb: usize) -> f64 {
        self.uplink_per_rb[user][rb] + self.downlink[user]
    }

    pub fn num_users(&self) -> usize {
        self.downlink.len()
    }

    pub fn num_rbs(&self) -> usize {
        self.uplink_per_rb.first().map_or(0, Vec::len)
    }
}

/// Delays of every user on every RB for a model of `config.model_size_bits`.
pub fn link_delays(config: &NetworkConfig) -> Result<LinkDelays> {
    config.validate()?;
    let z = config.model_size_bits;
    let delay = |rate: f64, what: &str| {
        if rate > 0.0 && rate.is_finite() {
            Ok(z / rate)
        } else {
            Err(Error::Domain(format!("{what} rate is {rate}; delay undefined")))
        }
    };
    let mut uplink_per_rb = Vec::with_capacity(config.num_users);
    let mut downlink = Vec::with_capacity(config.num_users);
    for i in 0..config.num_users {
        let row = (0..config.num_rbs)
            .map(|n| delay(config.rb_rate(i, n)?, "uplink"))
            .collect::<Result<Vec<_>>>()?;
        uplink_per_rb.push(row);
        downlink.push(delay(downlink_rate(config, i)?, "downlink")?);
    }
    Ok(LinkDelays {
        uplink_per_rb,
        downlink,
    })
}

/// Checks that a user-to-RB allocation satisfies the one-RB-per-selected-user
/// and one-user-per-RB constraints for the given association.
pub fn check_allocation(assoc: &[bool], alloc: &[Option<usize>], num_rbs: usize) -> Result<()> {
    if assoc.len() != alloc.len() {
        return Err(Error::Contract(format!(
            "association has {} users, allocation has {}",
            assoc.len(),
            alloc.len()
        )));
    }
    let mut used = vec![false; num_rbs];
    for (i, (&a, rb)) in assoc.iter().zip(alloc).enumerate() {
        match (a, rb) {
            (true, Some(n)) => {
                if *n >= num_rbs {
                    return Err(Error::Contract(format!("user {i} assigned to RB {n} of {num_rbs}")));
                }
                if std::mem::replace(&mut used[*n], true) {
                    return Err(Error::Contract(format!("RB {n} assigned twice")));
                }
            }
            (false, None) => {}
            (true, None) => return Err(Error::Contract(format!("selected user {i} has no RB"))),
            (false, Some(_)) => return Err(Error::Contract(format!("unselected user {i} holds an RB"))),
        }
    }
    Ok(())
}

/// Worst-case uplink-plus-downlink delay over selected users; zero if none.
pub fn round_time(assoc: &[bool], alloc: &[Option<usize>], delays: &LinkDelays) -> Result<f64> {
    if assoc.len() != delays.num_users() {
        return Err(Error::Contract(format!(
            "association has {} users, delays cover {}",
            assoc.len(),
            delays.num_users()
        )));
    }
    check_allocation(assoc, alloc, delays.num_rbs())?;
    Ok(alloc
        .iter()
        .enumerate()
        .filter_map(|(i, rb)| rb.map(|n| delays.total(i, n)))
        .fold(0.0, f64::max))
}

/// 0/1 matrix view (users × RBs) of an allocation.
pub fn allocation_matrix(alloc: &[Option<usize>], num_rbs: usize) -> Vec<Vec<bool>> {
    alloc
        .iter()
        .map(|rb| (0..num_rbs).map(|n| *rb == Some(n)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_config(distances: Vec<f64>, rbs: usize) -> NetworkConfig {
        let mut c = NetworkConfig::with_defaults(distances, 32.0 * 7850.0);
        c.num_rbs = rbs;
        c.interference = vec![0.0; rbs];
        c
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn gain_examples() {
        assert_eq!(channel_gain(1.0, 2.0).unwrap(), 1.0);
        assert!((channel_gain(10.0, 2.0).unwrap() - 0.01).abs() < 1e-18);
        assert!((channel_gain(500.0, 2.0).unwrap() - 4.0e-6).abs() < 1e-21);
        assert!(matches!(channel_gain(0.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(channel_gain(-3.0, 2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn noise_conversion() {
        // -174 dBm/Hz = 10^-20.4 W/Hz
        assert!(rel(dbm_per_hz_to_watts(-174.0), 3.981_071_705_534_972_5e-21) < 1e-14);
    }

    #[test]
    fn uplink_examples() {
        let c = table_config(vec![100.0], 5);
        assert_eq!(uplink_rate(&[false; 5], &c, 0).unwrap(), 0.0);

        // SNR of exactly one: P h = I + B N0 with B = 1 MHz.
        let mut unit = table_config(vec![1.0], 1);
        unit.noise_psd = 0.25e-6;
        unit.interference = vec![0.75];
        assert!(rel(uplink_rate(&[true], &unit, 0).unwrap(), 1.0e6) < 1e-12);

        // 40-digit reference evaluation of the rate formula.
        let r = uplink_rate(&[true, false, false, false, false], &c, 0).unwrap();
        assert!(rel(r, 34_548_052.186_886_003) < 1e-12, "{r}");
    }

    #[test]
    fn uplink_rejects_two_rbs() {
        let c = table_config(vec![100.0], 5);
        let err = uplink_rate(&[true, true, false, false, false], &c, 0);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn downlink_examples() {
        let mut unit = table_config(vec![1.0], 1);
        unit.noise_psd = 1.0 / 2e7;
        assert!(rel(downlink_rate(&unit, 0).unwrap(), 2.0e7) < 1e-12);

        let c = table_config(vec![100.0], 5);
        let r = downlink_rate(&c, 0).unwrap();
        assert!(rel(r, 604_522_481.861_798_01) < 1e-12, "{r}");

        let mut near = c.clone();
        near.user_distances = vec![100.0 / 2f64.sqrt()];
        assert!(downlink_rate(&near, 0).unwrap() > r);
    }

    #[test]
    fn delay_examples() {
        let mut unit = table_config(vec![1.0], 1);
        unit.noise_psd = 0.25e-6;
        unit.interference = vec![0.75];
        unit.model_size_bits = 1e6;
        let d = link_delays(&unit).unwrap();
        assert!(rel(d.uplink_per_rb[0][0], 1.0) < 1e-12);

        let c = table_config(vec![100.0, 250.0], 2);
        let d = link_delays(&c).unwrap();
        let expect_up = [0.007_271_032_202_948_688_8, 0.007_873_572_492_482_506_8];
        let expect_dn = [0.000_415_534_587_276_818_11, 0.000_455_365_020_790_920_52];
        for i in 0..2 {
            for n in 0..2 {
                assert!(rel(d.uplink_per_rb[i][n], expect_up[i]) < 1e-12);
            }
            assert!(rel(d.downlink[i], expect_dn[i]) < 1e-12);
        }

        let mut doubled = c.clone();
        doubled.model_size_bits *= 2.0;
        let d2 = link_delays(&doubled).unwrap();
        for i in 0..2 {
            assert!(rel(d2.downlink[i], 2.0 * d.downlink[i]) < 1e-15);
            for n in 0..2 {
                assert!(rel(d2.uplink_per_rb[i][n], 2.0 * d.uplink_per_rb[i][n]) < 1e-15);
            }
        }
    }

    fn delays_from_totals(totals: &[f64]) -> LinkDelays {
        LinkDelays {
            uplink_per_rb: totals.iter().map(|&t| vec![t - 0.5; totals.len()]).collect(),
            downlink: vec![0.5; totals.len()],
        }
    }

    #[test]
    fn round_time_examples() {
        let d = delays_from_totals(&[1.0, 3.0, 2.0]);
        assert_eq!(round_time(&[false; 3], &[None; 3], &d).unwrap(), 0.0);
        assert_eq!(round_time(&[false, true, false], &[None, Some(2), None], &d).unwrap(), 3.0);
        let single = delays_from_totals(&[2.5]);
        assert_eq!(round_time(&[true], &[Some(0)], &single).unwrap(), 2.5);
        assert_eq!(
            round_time(&[true, true, true], &[Some(0), Some(1), Some(2)], &d).unwrap(),
            3.0
        );
    }

    #[test]
    fn round_time_rejects_inconsistent_allocation() {
        let d = delays_from_totals(&[1.0, 3.0]);
        for (assoc, alloc) in [
            ([true, false], [None, None]),
            ([false, false], [Some(0), None]),
            ([true, true], [Some(1), Some(1)]),
            ([true, false], [Some(2), None]),
        ] {
            assert!(matches!(round_time(&assoc, &alloc, &d), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = table_config(vec![10.0, 20.0], 2);
        assert!(c.validate().is_ok());
        c.interference = vec![0.0, -1.0];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = table_config(vec![10.0, 0.0], 2);
        assert!(c.validate().is_err());
        c.user_distances = vec![10.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn distance_rank_breaks_ties_by_index() {
        let c = table_config(vec![30.0, 10.0, 30.0, 5.0], 1);
        assert_eq!(c.users_by_distance(), vec![3, 1, 0, 2]);
    }

    fn arb_config() -> impl Strategy<Value = NetworkConfig> {
        (
            prop::collection::vec(1.0f64..700.0, 1..6),
            1usize..5,
            1.5f64..4.0,
            0.01f64..10.0,
            1e4f64..1e8,
            -190.0f64..-150.0,
            1e3f64..1e7,
        )
            .prop_flat_map(|(d, r, alpha, p, b, n0, z)| {
                prop::collection::vec(0.0f64..1e-9, r).prop_map(move |interference| {
                    let mut c = table_config(d.clone(), r);
                    c.pathloss_exponent = alpha;
                    c.tx_power_user = p;
                    c.tx_power_bs = p;
                    c.rb_bandwidth = b;
                    c.dl_bandwidth = 20.0 * b;
                    c.noise_psd = dbm_per_hz_to_watts(n0);
                    c.model_size_bits = z;
                    c.interference = interference;
                    c
                })
            })
    }

    proptest! {
        #[test]
        fn delays_finite_and_positive(c in arb_config()) {
            let d = link_delays(&c).unwrap();
            for row in &d.uplink_per_rb {
                for &v in row {
                    prop_assert!(v.is_finite() && v > 0.0);
                }
            }
            for &v in &d.downlink {
                prop_assert!(v.is_finite() && v > 0.0);
            }
        }

        #[test]
        fn rates_monotone(c in arb_config(), bump in 1.01f64..3.0) {
            let user = 0;
            let base = c.rb_rate(user, 0).unwrap();
            let mut louder = c.clone();
            louder.tx_power_user *= bump;
            prop_assert!(louder.rb_rate(user, 0).unwrap() > base);
            let mut nearer = c.clone();
            nearer.user_distances[user] /= bump;
            prop_assert!(nearer.rb_rate(user, 0).unwrap() > base);
            let mut noisier = c.clone();
            noisier.interference[0] = noisier.interference[0] * bump + 1e-12;
            prop_assert!(noisier.rb_rate(user, 0).unwrap() < base);
            let dl = downlink_rate(&c, user).unwrap();
            prop_assert!(downlink_rate(&nearer, user).unwrap() > dl);
        }

        #[test]
        fn single_rb_sum_form_matches_term(c in arb_config()) {
            for n in 0..c.num_rbs {
                let mut v = vec![false; c.num_rbs];
                v[n] = true;
                prop_assert_eq!(uplink_rate(&v, &c, 0).unwrap(), c.rb_rate(0, n).unwrap());
            }
        }

        #[test]
        fn round_time_ignores_unselected_rows(
            totals in prop::collection::vec(0.1f64..10.0, 3..7),
            junk in prop::collection::vec(0.1f64..10.0, 3..7),
        ) {
            // users 0 and 1 selected; the rest carry arbitrary delays
            let u = totals.len();
            let alloc: Vec<Option<usize>> = (0..u).map(|i| (i < 2).then_some(i)).collect();
            let assoc: Vec<bool> = alloc.iter().map(Option::is_some).collect();
            let a = delays_from_totals(&totals);
            let mut permuted = totals.clone();
            let tail: Vec<f64> = junk.iter().cycle().take(u - 2).copied().collect();
            permuted[2..].copy_from_slice(&tail);
            let b = delays_from_totals(&permuted);
            prop_assert_eq!(round_time(&assoc, &alloc, &a).unwrap(), round_time(&assoc, &alloc, &b).unwrap());
        }
    }
}
