//! Duration text checks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use ckpt_core::timefmt::{format_duration, parse_duration};

pub const CANONICAL: [(u64, &str); 3] = [(0, "0-00:00:00"), (3661, "0-01:01:01"), (90061, "1-01:01:01")];

/// Hand-assembled `D-HH:MM:SS`, kept apart from the library formatter.
fn reference(secs: u64) -> String {
    let (d, h, m, s) = (secs / 86400, secs / 3600 % 24, secs / 60 % 60, secs % 60);
    let two = |v: u64| if v < 10 { format!("0{v}") } else { v.to_string() };
    format!("{d}-{}:{}:{}", two(h), two(m), two(s))
}

pub fn canonical() -> Result<(), String> {
    for (secs, text) in CANONICAL {
        if format_duration(secs) != text {
            return Err(format!("{secs} formats as {}", format_duration(secs)));
        }
        if parse_duration(text) != Ok(secs) {
            return Err(format!("{text} parses as {:?}", parse_duration(text)));
        }
    }
    Ok(())
}

pub fn roundtrips(n: usize, seed: u64) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    for i in 0..n {
        let secs = match i % 4 {
            0 => rng.gen_range(0..86_400),
            1 => rng.gen_range(0..100 * 86_400),
            2 => rng.gen_range(0..u64::MAX / 2),
            _ => rng.gen(),
        };
        let text = format_duration(secs);
        if text != reference(secs) {
            return Err(format!("{secs} formats as {text}, expected {}", reference(secs)));
        }
        match parse_duration(&text) {
            Ok(v) if v == secs => {}
            r => return Err(format!("{text} parses as {r:?}, expected {secs}")),
        }
    }
    Ok(())
}
