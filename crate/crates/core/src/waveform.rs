//! Time-dependent source waveforms and switch schedules.

use std::f64::consts::PI;
use std::fmt;

/// Trapezoidal pulse train.
///
/// One period starts with a rising ramp of length `rise` at `delay`, holds
/// `high` until `duty * period`, falls over `fall` and holds `low` for the
/// remainder. The waveform repeats for all `t`, including `t < delay`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pwm {
    pub low: f64,
    pub high: f64,
    pub period: f64,
    pub duty: f64,
    pub rise: f64,
    pub fall: f64,
    pub delay: f64,
}

impl Pwm {
    pub fn eval(&self, t: f64) -> f64 {
        if self.duty <= 0.0 {
            return self.low;
        }
        if self.duty >= 1.0 {
            return self.high;
        }
        let tau = (t - self.delay).rem_euclid(self.period);
        let on_end = self.duty * self.period;
        let span = self.high - self.low;
        if tau < self.rise {
            self.low + span * tau / self.rise
        } else if tau < on_end {
            self.high
        } else if tau < on_end + self.fall {
            self.high - span * (tau - on_end) / self.fall
        } else {
            self.low
        }
    }

    pub(crate) fn check(&self) -> Result<(), String> {
        if !(self.period > 0.0) || !self.period.is_finite() {
            return Err(format!("PWM period must be positive, got {}", self.period));
        }
        if !(0.0..=1.0).contains(&self.duty) {
            return Err(format!("PWM duty must lie in [0, 1], got {}", self.duty));
        }
        if !(self.rise >= 0.0) || !(self.fall >= 0.0) {
            return Err("PWM rise/fall times must be nonnegative".to_string());
        }
        if self.duty > 0.0 && self.duty < 1.0 {
            let on_end = self.duty * self.period;
            if self.rise > on_end || on_end + self.fall > self.period {
                return Err("PWM edges do not fit inside one period".to_string());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Waveform {
    Dc(f64),
    /// `amplitude * sin(2π frequency t + phase)`, phase in radians.
    Sine {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    Pwm(Pwm),
}

impl Waveform {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Waveform::Dc(level) => level,
            Waveform::Sine {
                amplitude,
                frequency,
                phase,
            } => amplitude * (2.0 * PI * frequency * t + phase).sin(),
            Waveform::Pwm(ref p) => p.eval(t),
        }
    }

    pub(crate) fn check(&self) -> Result<(), String> {
        match self {
            Waveform::Dc(level) if !level.is_finite() => Err("DC level must be finite".into()),
            Waveform::Dc(_) => Ok(()),
            Waveform::Sine { frequency, .. } if !(*frequency > 0.0) => {
                Err(format!("sine frequency must be positive, got {frequency}"))
            }
            Waveform::Sine { .. } => Ok(()),
            Waveform::Pwm(p) => p.check(),
        }
    }
}

impl fmt::Display for Waveform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Waveform::Dc(level) => write!(f, "DC {level:e}"),
            Waveform::Sine {
                amplitude,
                frequency,
                phase,
            } => write!(f, "SIN({amplitude:e} {frequency:e} {phase:e})"),
            Waveform::Pwm(p) => write!(
                f,
                "PWM({:e} {:e} {:e} {:e} {:e} {:e} {:e})",
                p.low, p.high, p.period, p.duty, p.rise, p.fall, p.delay
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pulse() -> Pwm {
        Pwm {
            low: 0.0,
            high: 1.0,
            period: 10.0,
            duty: 0.5,
            rise: 1.0,
            fall: 2.0,
            delay: 0.0,
        }
    }

    #[test]
    fn pwm_phases() {
        let p = pulse();
        assert_eq!(p.eval(0.0), 0.0);
        assert!((p.eval(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(p.eval(3.0), 1.0);
        assert!((p.eval(6.0) - 0.5).abs() < 1e-15);
        assert_eq!(p.eval(8.0), 0.0);
        assert_eq!(p.eval(13.0), 1.0);
    }

    #[test]
    fn pwm_delay_wraps_backwards() {
        let p = Pwm {
            delay: 4.0,
            ..pulse()
        };
        // t = 1 is 7 time units into the previous period.
        assert_eq!(p.eval(1.0), 0.0);
        assert_eq!(p.eval(7.0), 1.0);
    }

    #[test]
    fn pwm_extreme_duty() {
        assert_eq!(
            Pwm {
                duty: 0.0,
                ..pulse()
            }
            .eval(3.0),
            0.0
        );
        assert_eq!(
            Pwm {
                duty: 1.0,
                ..pulse()
            }
            .eval(9.5),
            1.0
        );
    }

    #[test]
    fn invalid_waveforms() {
        assert!(Waveform::Sine {
            amplitude: 1.0,
            frequency: 0.0,
            phase: 0.0
        }
        .check()
        .is_err());
        assert!(Pwm {
            duty: 1.5,
            ..pulse()
        }
        .check()
        .is_err());
        assert!(Pwm {
            rise: -1.0,
            ..pulse()
        }
        .check()
        .is_err());
        assert!(Pwm {
            fall: 6.0,
            ..pulse()
        }
        .check()
        .is_err());
    }
}
