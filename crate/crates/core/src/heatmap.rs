//! SVG attention heatmaps with context-correct and context-incorrect
//! successor cells outlined.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::model::AttnMatrix;
use crate::seqgen::GeneratedSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellClass {
    Plain,
    /// A successor of the query token from the same 2nd-order chunk type.
    Correct,
    /// A successor of the query token from another chunk type.
    Incorrect,
}

const CELL: usize = 6;
const CORRECT_STROKE: &str = "#1a9641";
const INCORRECT_STROKE: &str = "#d7191c";

/// Outline class of every cell; only predictable query rows are outlined.
pub fn cell_classes(seq: &GeneratedSequence) -> Vec<Vec<CellClass>> {
    let n = seq.len();
    let mut out = vec![vec![CellClass::Plain; n]; n];
    for a in seq.annotations.iter().filter(|a| a.predictable) {
        let t = a.position;
        for p in seq.successor_positions(t).into_iter().filter(|&p| p < t) {
            out[t][p] = if a.correct_successor_positions_2nd.contains(&p) {
                CellClass::Correct
            } else {
                CellClass::Incorrect
            };
        }
    }
    out
}

/// Grid heatmap of `attn`; darker cells carry more mass.
pub fn render_heatmap(attn: &AttnMatrix, seq: Option<&GeneratedSequence>) -> Result<String> {
    let n = attn.n;
    if n == 0 {
        return Err(LabError::Input("cannot render an empty attention matrix".into()));
    }
    if let Some(s) = seq {
        if s.len() != n {
            return Err(LabError::Input(format!("{n}×{n} attention for a sequence of length {}", s.len())));
        }
    }
    let classes = seq.map(cell_classes);
    let size = n * CELL;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let mut outlines = String::new();
    for i in 0..n {
        for j in 0..n {
            let v = attn.get(i, j).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let (x, y) = (j * CELL, i * CELL);
            let _ = writeln!(
                svg,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)"/>"#
            );
            let stroke = match classes.as_ref().map(|c| c[i][j]) {
                Some(CellClass::Correct) => CORRECT_STROKE,
                Some(CellClass::Incorrect) => INCORRECT_STROKE,
                _ => continue,
            };
            let _ = writeln!(
                outlines,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="none" stroke="{stroke}" stroke-width="1"/>"#
            );
        }
    }
    svg.push_str(&outlines);
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_heatmap(attn: &AttnMatrix, seq: Option<&GeneratedSequence>, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, render_heatmap(attn, seq)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{adaptive_induction_attention, oracle_match_length, ChunkGeometry, CircuitConfig};
    use crate::seqgen::{generate, SequenceSpec};

    #[test]
    fn identity_matrix_renders_every_cell() {
        let mut a = AttnMatrix::zeros(4);
        for i in 0..4 {
            a.set(i, i, 1.0);
        }
        let svg = render_heatmap(&a, None).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        // background plus 16 cells
        assert_eq!(svg.matches("<rect").count(), 17);
        assert_eq!(svg.matches("rgb(0,0,255)").count(), 4);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        assert!(render_heatmap(&AttnMatrix::zeros(0), None).is_err());
    }

    #[test]
    fn oracle_mass_falls_only_on_correct_cells() {
        let seq = generate(&SequenceSpec::default_second().with_seed(2)).unwrap();
        let m = oracle_match_length(&seq).unwrap();
        let attn = adaptive_induction_attention(&seq.tokens, ChunkGeometry::of(&seq), &CircuitConfig::new(m))
            .unwrap()
            .to_dense();
        let classes = cell_classes(&seq);
        let mut outlined_with_mass = 0;
        for t in seq.predictable_positions() {
            for p in 0..seq.len() {
                if attn.get(t, p) > 0.0 && classes[t][p] != CellClass::Plain {
                    assert_eq!(classes[t][p], CellClass::Correct, "row {t} col {p}");
                    outlined_with_mass += 1;
                }
            }
        }
        assert!(outlined_with_mass > 0);
        let svg = render_heatmap(&attn, Some(&seq)).unwrap();
        assert!(svg.contains(CORRECT_STROKE) && svg.contains(INCORRECT_STROKE));
    }
}
