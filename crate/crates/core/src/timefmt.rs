//! `D-HH:MM:SS` durations and the `consumed=` accounting comment.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot parse duration {input:?}: {reason}")]
pub struct ParseError {
    pub input: String,
    pub reason: &'static str,
}

pub fn format_duration(seconds: u64) -> String {
    let days = seconds / 86_400;
    let rem = seconds % 86_400;
    format!("{}-{:02}:{:02}:{:02}", days, rem / 3600, (rem % 3600) / 60, rem % 60)
}

pub fn parse_duration(text: &str) -> Result<u64, ParseError> {
    let err = |reason| ParseError { input: text.to_string(), reason };
    let (days, clock) = text.split_once('-').ok_or_else(|| err("missing '-' after days"))?;
    if days.is_empty() || !days.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err("days must be decimal digits"));
    }
    let days: u64 = days.parse().map_err(|_| err("days out of range"))?;
    let mut parts = clock.split(':');
    let mut field = |max: u64| -> Result<u64, ParseError> {
        let p = parts.next().ok_or_else(|| err("expected HH:MM:SS"))?;
        if p.len() != 2 || !p.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err("clock fields must be two digits"));
        }
        let v: u64 = p.parse().unwrap();
        if v >= max {
            return Err(err("clock field out of range"));
        }
        Ok(v)
    };
    let h = field(24)?;
    let m = field(60)?;
    let s = field(60)?;
    if parts.next().is_some() {
        return Err(err("trailing clock fields"));
    }
    days.checked_mul(86_400).and_then(|d| d.checked_add(h * 3600 + m * 60 + s)).ok_or_else(|| err("duration overflows"))
}

/// Comment text recording consumed walltime.
pub fn format_comment(consumed_seconds: u64) -> String {
    format!("consumed={}", format_duration(consumed_seconds))
}

/// Extract the consumed seconds from a comment. Whitespace-separated
/// `key=value` tokens; unknown keys are ignored. Missing key reads as 0.
pub fn parse_comment(text: &str) -> Result<u64, ParseError> {
    let mut consumed = 0;
    for tok in text.split_whitespace() {
        if let Some(v) = tok.strip_prefix("consumed=") {
            consumed = parse_duration(v)?;
        }
    }
    Ok(consumed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_examples() {
        assert_eq!(format_duration(0), "0-00:00:00");
        assert_eq!(format_duration(3661), "0-01:01:01");
        assert_eq!(format_duration(90061), "1-01:01:01");
        assert_eq!(parse_duration("1-01:01:01"), Ok(90061));
    }

    #[test]
    fn malformed_rejected() {
        for bad in
            ["", "01:01:01", "0-1:01:01", "0-24:00:00", "0-00:60:00", "x-00:00:00", "0-00:00:00:00", "-1-00:00:00"]
        {
            assert!(parse_duration(bad).is_err(), "{bad:?} parsed");
        }
    }

    #[test]
    fn comment_round_trip_and_unknown_keys() {
        assert_eq!(format_comment(75 * 60), "consumed=0-01:15:00");
        assert_eq!(parse_comment("gen=3 consumed=0-01:15:00 note=x"), Ok(4500));
        assert_eq!(parse_comment(""), Ok(0));
        assert!(parse_comment("consumed=bogus").is_err());
    }

    proptest! {
        #[test]
        fn parse_inverts_format(s in 0u64..10_000_000_000) {
            prop_assert_eq!(parse_duration(&format_duration(s)), Ok(s));
        }
    }
}
