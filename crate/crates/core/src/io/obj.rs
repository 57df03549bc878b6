//! Point-cloud Wavefront OBJ: one `v x y z` line per vertex, no faces.

use std::fmt::Write as _;
use std::path::Path;

use super::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::Shape;

/// OBJ text for `shape`, coordinates with 9 significant digits.
pub fn format_obj(shape: &Shape) -> String {
    let mut out = String::with_capacity(shape.n_vertices() * 48);
    for p in shape.coords().chunks_exact(3) {
        writeln!(out, "v {:.8e} {:.8e} {:.8e}", p[0], p[1], p[2]).expect("writing to a String");
    }
    out
}

pub fn write_obj(shape: &Shape, path: &Path) -> Result<()> {
    write_atomic(path, format_obj(shape).as_bytes())
}

/// Parses `v` lines in order, skipping blank lines and `#` comments. Any
/// other directive is an error. `path` is used only in error messages.
pub fn parse_obj(text: &str, path: &Path) -> Result<Shape> {
    let mut coords = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let values: Vec<&str> = tokens.collect();
                if values.len() != 3 {
                    return Err(parse_err(format!("vertex needs 3 coordinates, found {}", values.len())));
                }
                for v in values {
                    let x: f64 = v.parse().map_err(|_| parse_err(format!("bad coordinate `{v}`")))?;
                    if !x.is_finite() {
                        return Err(parse_err(format!("non-finite coordinate `{v}`")));
                    }
                    coords.push(x);
                }
            }
            Some(other) => return Err(parse_err(format!("unsupported directive `{other}`"))),
            None => unreachable!("line is non-empty"),
        }
    }
    Shape::new(coords)
}

pub fn read_obj(path: &Path) -> Result<Shape> {
    parse_obj(&read_text(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> Shape {
        Shape::new(vec![
            0.0, 1.0, -2.5, 1.0 / 3.0, 1e-12, 12345.678901234, -7.0, 0.1, 0.2, 3.0, 4.0, 5.0,
        ])
        .unwrap()
    }

    #[test]
    fn format_has_one_line_per_vertex_with_nine_digits() {
        let text = format_obj(&shape());
        let lines: Vec<&str> = text.split('\n').collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "");
        assert_eq!(lines[1], "v 3.33333333e-1 1.00000000e-12 1.23456789e4");
    }

    #[test]
    fn roundtrip_within_print_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.obj");
        let s = shape();
        write_obj(&s, &path).unwrap();
        let back = read_obj(&path).unwrap();
        for (a, b) in s.coords().iter().zip(back.coords()) {
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let text = "# header\n\nv 0 0 0\nv 1 0 0\n  # indented\nv 0 1 0\nv 0 0 1\n";
        assert_eq!(parse_obj(text, Path::new("x.obj")).unwrap().n_vertices(), 4);
    }

    #[test]
    fn face_directive_is_rejected_with_line_number() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n";
        match parse_obj(text, Path::new("x.obj")).unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 4);
                assert!(msg.contains("`f`"), "{msg}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn malformed_vertex_lines_are_rejected() {
        for text in ["v 1 2\n", "v 1 2 x\n", "v 1 2 3 4\n", "v nan 0 0\n"] {
            assert_eq!(parse_obj(text, Path::new("x.obj")).unwrap_err().kind(), "parse", "{text}");
        }
    }

    #[test]
    fn empty_file_fails_the_vertex_count_invariant() {
        let err = parse_obj("", Path::new("x.obj")).unwrap_err();
        assert_eq!(err.kind(), "invalid-argument");
        assert!(err.to_string().contains('4'), "{err}");
    }
}
