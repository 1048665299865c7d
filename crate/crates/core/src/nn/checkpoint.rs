//! Plain-text checkpoint format.
//!
//! ```text
//! weseg-checkpoint 1
//! method <name>
//! layers <count>
//! layer <activation> <out> <in>
//! weight
//! <out lines of <in> values>
//! bias
//! <one line of <out> values>
//! ...
//! attention <hidden> <embedding> | attention none
//! v / w / classifier_weight / classifier_bias blocks
//! standardizer <dim> | standardizer none
//! mean / std blocks
//! end
//! ```
//!
//! Values are written with 17 significant digits so they parse back to the
//! identical 64-bit float.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, AttentionHead, Dense, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "weseg-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub method: String,
    pub params: ModelParams,
    /// Per-dimension feature mean and standard deviation.
    pub standardizer: Option<(Vec<f64>, Vec<f64>)>,
}

fn push_values(out: &mut String, values: &[f64]) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        write!(out, "{v:.16e}").expect("writing to String");
    }
    out.push('\n');
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC} {CHECKPOINT_VERSION}").unwrap();
        writeln!(out, "method {}", self.method).unwrap();
        writeln!(out, "layers {}", self.params.layers.len()).unwrap();
        for layer in &self.params.layers {
            writeln!(
                out,
                "layer {} {} {}",
                layer.activation.name(),
                layer.output_dim(),
                layer.input_dim()
            )
            .unwrap();
            out.push_str("weight\n");
            for row in layer.weight.rows() {
                push_values(&mut out, &row.to_vec());
            }
            out.push_str("bias\n");
            push_values(&mut out, layer.bias.as_slice().expect("contiguous"));
        }
        match &self.params.attention {
            None => out.push_str("attention none\n"),
            Some(head) => {
                writeln!(out, "attention {} {}", head.hidden_dim(), head.embedding_dim()).unwrap();
                out.push_str("v\n");
                for row in head.v.rows() {
                    push_values(&mut out, &row.to_vec());
                }
                out.push_str("w\n");
                push_values(&mut out, &head.w.to_vec());
                out.push_str("classifier_weight\n");
                push_values(&mut out, &head.classifier_weight.to_vec());
                out.push_str("classifier_bias\n");
                push_values(&mut out, &[head.classifier_bias]);
            }
        }
        match &self.standardizer {
            None => out.push_str("standardizer none\n"),
            Some((mean, std)) => {
                writeln!(out, "standardizer {}", mean.len()).unwrap();
                out.push_str("mean\n");
                push_values(&mut out, mean);
                out.push_str("std\n");
                push_values(&mut out, std);
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut p = Parser::new(text);
        let header = p.fields()?;
        if header.len() != 2 || header[0] != MAGIC {
            return Err(p.err("missing checkpoint header"));
        }
        let version: u32 = p.parse(header[1])?;
        if version != CHECKPOINT_VERSION {
            return Err(p.err(format!("unsupported version {version}")));
        }
        let method = p.keyword_value("method")?.to_string();
        let n_layers = p.keyword_value("layers")?;
        let n_layers: usize = p.parse(n_layers)?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let f = p.fields()?;
            if f.len() != 4 || f[0] != "layer" {
                return Err(p.err("expected `layer <activation> <out> <in>`"));
            }
            let activation = Activation::parse(f[1]).ok_or_else(|| p.err(format!("unknown activation {}", f[1])))?;
            let rows: usize = p.parse(f[2])?;
            let cols: usize = p.parse(f[3])?;
            p.keyword("weight")?;
            let weight = p.matrix(rows, cols)?;
            p.keyword("bias")?;
            let bias = Array1::from(p.values(rows)?);
            layers.push(Dense { weight, bias, activation });
        }
        let f = p.fields()?;
        let attention = match f.as_slice() {
            ["attention", "none"] => None,
            ["attention", h, e] => {
                let hidden: usize = p.parse(h)?;
                let emb: usize = p.parse(e)?;
                p.keyword("v")?;
                let v = p.matrix(hidden, emb)?;
                p.keyword("w")?;
                let w = Array1::from(p.values(hidden)?);
                p.keyword("classifier_weight")?;
                let classifier_weight = Array1::from(p.values(emb)?);
                p.keyword("classifier_bias")?;
                let classifier_bias = p.values(1)?[0];
                Some(AttentionHead { v, w, classifier_weight, classifier_bias })
            }
            _ => return Err(p.err("expected attention block")),
        };
        let f = p.fields()?;
        let standardizer = match f.as_slice() {
            ["standardizer", "none"] => None,
            ["standardizer", d] => {
                let dim: usize = p.parse(d)?;
                p.keyword("mean")?;
                let mean = p.values(dim)?;
                p.keyword("std")?;
                let std = p.values(dim)?;
                Some((mean, std))
            }
            _ => return Err(p.err("expected standardizer block")),
        };
        p.keyword("end")?;
        let params = ModelParams { layers, attention };
        params.validate()?;
        Ok(Checkpoint { method, params, standardizer })
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_text(&text)
}

struct Parser<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser { lines: text.lines().enumerate(), line_no: 0 }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::format(format!("checkpoint line {}", self.line_no), message)
    }

    fn fields(&mut self) -> Result<Vec<&'a str>> {
        let (no, line) = self.lines.next().ok_or_else(|| self.err("unexpected end of file"))?;
        self.line_no = no + 1;
        Ok(line.split_ascii_whitespace().collect())
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("cannot parse `{s}`")))
    }

    fn keyword(&mut self, word: &str) -> Result<()> {
        let f = self.fields()?;
        if f.as_slice() != [word] {
            return Err(self.err(format!("expected `{word}`")));
        }
        Ok(())
    }

    fn keyword_value(&mut self, word: &str) -> Result<&'a str> {
        let f = self.fields()?;
        match f.as_slice() {
            [k, v] if *k == word => Ok(v),
            _ => Err(self.err(format!("expected `{word} <value>`"))),
        }
    }

    fn values(&mut self, count: usize) -> Result<Vec<f64>> {
        let f = self.fields()?;
        if f.len() != count {
            return Err(self.err(format!("expected {count} values, found {}", f.len())));
        }
        f.iter().map(|s| self.parse::<f64>(s)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.values(cols)?);
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("row-major data"))
    }
}
