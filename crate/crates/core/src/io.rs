//! JSON output with every float written to 17 significant digits.
//!
//! `serde_json` normally prints the shortest round-tripping representation.
//! Files produced here instead use a fixed `d.ddddddddddddddddde±x` form so
//! that byte-level comparisons across runs are meaningful and every value
//! round-trips exactly.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

use crate::error::Result;

/// Formats an `f64` with 17 significant digits.
pub fn format_f64(value: f64) -> String {
    format!("{value:.16e}")
}

struct Fixed17<F>(F);

macro_rules! delegate {
    ($($name:ident $(, $arg:ident: $ty:ty)*);* $(;)?) => {
        $(
            fn $name<W: ?Sized + Write>(&mut self, writer: &mut W $(, $arg: $ty)*) -> io::Result<()> {
                self.0.$name(writer $(, $arg)*)
            }
        )*
    };
}

impl<F: Formatter> Formatter for Fixed17<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    delegate! {
        begin_array;
        end_array;
        begin_array_value, first: bool;
        end_array_value;
        begin_object;
        end_object;
        begin_object_key, first: bool;
        end_object_key;
        begin_object_value;
        end_object_value;
    }
}

pub fn to_json_compact<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Fixed17(CompactFormatter));
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

pub fn to_json_pretty<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Fixed17(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(format_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(format_f64(-2.5), "-2.5000000000000000e0");
        assert_eq!(
            to_json_compact(&[1.0f64, 0.0]).unwrap(),
            "[1.0000000000000000e0,0.0000000000000000e0]"
        );
    }

    #[test]
    fn integers_untouched() {
        #[derive(Serialize)]
        struct S {
            n: usize,
            x: f64,
        }
        assert_eq!(
            to_json_compact(&S { n: 3, x: 0.5 }).unwrap(),
            r#"{"n":3,"x":5.0000000000000000e-1}"#
        );
    }

    proptest! {
        #[test]
        fn floats_round_trip_exactly(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
            let text = to_json_compact(&x).unwrap();
            let back: f64 = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
