//! Byte-stable JSON output: sorted object keys, floats with 17 significant
//! digits, two-space indentation.

use std::io;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{PruneError, Result};

struct Canonical<'a>(PrettyFormatter<'a>);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl Formatter for Canonical<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        begin_object_value(),
        end_object_value(),
    );
}

/// Serializes with keys sorted at every level.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // Value's map is ordered by key, which sorts struct fields too
    let tree = serde_json::to_value(value).map_err(|e| PruneError::Numerical(format!("report: {e}")))?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Canonical(PrettyFormatter::new()));
    tree.serialize(&mut ser)
        .map_err(|e| PruneError::Numerical(format!("report: {e}")))?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("json is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn sorted_and_fixed_floats() {
        let m: HashMap<&str, f64> = [("b", 0.1), ("a", 1.0), ("c", -2.5e-300)].into_iter().collect();
        let s = to_canonical_json(&m).unwrap();
        assert_eq!(
            s,
            "{\n  \"a\": 1.0000000000000000e0,\n  \"b\": 1.0000000000000001e-1,\n  \"c\": -2.5000000000000000e-300\n}\n"
        );
        let back: HashMap<String, f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back["b"], 0.1);
    }
}
