//! Text formats: spin systems, waveforms, trajectories, state expressions,
//! experiment configurations and CSV tables.
//!
//! # Spin system documents
//!
//! ```toml
//! [[spin]]
//! label = "Ha"          # optional
//! isotope = "1H"
//! multiplicity = 2      # optional for known isotopes
//! offset_hz = 0.0
//!
//! [[coupling]]
//! i = 0                 # index or label
//! j = "Ca"
//! j_hz = 140.0
//! model = "weak"        # optional: weak | strong
//!
//! [[quadrupolar]]
//! spin = 0
//! omega_q_hz = 10000.0
//! eta = 0.5
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::basis::{embedded_spin_operator, BasisLabel, ProductBasis, SpinOp};
use crate::error::{domain, parse_err, Error, Result};
use crate::grape::{Ensemble, GradientMode, Parametrization};
use crate::linalg::{CMat, C64};
use crate::liouville::{Channel, ControlSet, Provenance, StateVector, Trajectory};
use crate::system::{default_multiplicity, Coupling, CouplingModel, Quadrupolar, Spin, SpinSystem};

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
    parse_err(line, e.message().trim().to_string())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemDoc {
    #[serde(default)]
    spin: Vec<Spanned<SpinDoc>>,
    #[serde(default)]
    coupling: Vec<Spanned<CouplingDoc>>,
    #[serde(default)]
    quadrupolar: Vec<Spanned<QuadDoc>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpinDoc {
    isotope: Spanned<String>,
    multiplicity: Option<Spanned<i64>>,
    offset_hz: Spanned<f64>,
    label: Option<Spanned<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CouplingDoc {
    i: Spanned<toml::Value>,
    j: Spanned<toml::Value>,
    j_hz: Spanned<f64>,
    model: Option<CouplingModel>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QuadDoc {
    spin: Spanned<toml::Value>,
    omega_q_hz: Spanned<f64>,
    eta: Spanned<f64>,
}

/// Parses a spin system document. Errors carry the line of the offending
/// field.
pub fn parse_system(text: &str) -> Result<SpinSystem> {
    let doc: SystemDoc = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    let at = |span: std::ops::Range<usize>| line_of(text, span.start);

    if doc.spin.is_empty() {
        return Err(parse_err(0, "document defines no [[spin]] entries"));
    }
    let mut spins = Vec::with_capacity(doc.spin.len());
    let mut labels = HashSet::new();
    for s in &doc.spin {
        let s = s.get_ref();
        let iso = s.isotope.get_ref().trim();
        if iso.is_empty() {
            return Err(parse_err(at(s.isotope.span()), "field `isotope`: empty"));
        }
        let mult = match &s.multiplicity {
            Some(m) => {
                let v = *m.get_ref();
                if v < 2 {
                    return Err(parse_err(at(m.span()), format!("field `multiplicity`: {v} is below 2")));
                }
                v as usize
            }
            None => default_multiplicity(iso).ok_or_else(|| {
                parse_err(
                    at(s.isotope.span()),
                    format!("field `multiplicity`: required for unknown isotope {iso:?}"),
                )
            })?,
        };
        let offset = *s.offset_hz.get_ref();
        if !offset.is_finite() {
            return Err(parse_err(at(s.offset_hz.span()), "field `offset_hz`: not finite"));
        }
        let mut spin = Spin::new(iso, mult, offset);
        if let Some(l) = &s.label {
            let name = l.get_ref().trim();
            if name.is_empty() || name.parse::<usize>().is_ok() {
                return Err(parse_err(at(l.span()), format!("field `label`: {name:?} is not a usable name")));
            }
            if !labels.insert(name.to_string()) {
                return Err(parse_err(at(l.span()), format!("field `label`: duplicate label {name:?}")));
            }
            spin = spin.with_label(name);
        }
        spins.push(spin);
    }

    let resolve = |v: &Spanned<toml::Value>, field: &str| -> Result<usize> {
        let line = at(v.span());
        let k = match v.get_ref() {
            toml::Value::Integer(k) if *k >= 0 => *k as usize,
            toml::Value::String(name) => spins
                .iter()
                .position(|s| s.label.as_deref() == Some(name.trim()))
                .ok_or_else(|| parse_err(line, format!("field `{field}`: unknown spin label {name:?}")))?,
            other => return Err(parse_err(line, format!("field `{field}`: expected spin index or label, got {other}"))),
        };
        if k >= spins.len() {
            return Err(parse_err(line, format!("field `{field}`: spin index {k} out of range for {} spins", spins.len())));
        }
        Ok(k)
    };

    let mut couplings = Vec::with_capacity(doc.coupling.len());
    let mut pairs = HashSet::new();
    for c in &doc.coupling {
        let line = at(c.span());
        let c = c.get_ref();
        let (i, j) = (resolve(&c.i, "i")?, resolve(&c.j, "j")?);
        if i == j {
            return Err(parse_err(at(c.j.span()), "field `j`: a spin cannot couple to itself"));
        }
        let (i, j) = (i.min(j), i.max(j));
        if !pairs.insert((i, j)) {
            return Err(parse_err(line, format!("[[coupling]]: duplicate coupling between spins {i} and {j}")));
        }
        let jv = *c.j_hz.get_ref();
        if !jv.is_finite() {
            return Err(parse_err(at(c.j_hz.span()), "field `j_hz`: not finite"));
        }
        let mut coupling = Coupling::new(i, j, jv);
        coupling.model = c.model;
        couplings.push(coupling);
    }

    let mut quads = Vec::with_capacity(doc.quadrupolar.len());
    let mut seen = HashSet::new();
    for q in &doc.quadrupolar {
        let line = at(q.span());
        let q = q.get_ref();
        let spin = resolve(&q.spin, "spin")?;
        if spins[spin].multiplicity < 3 {
            return Err(parse_err(at(q.spin.span()), format!("field `spin`: spin {spin} has no quadrupole moment (multiplicity < 3)")));
        }
        if !seen.insert(spin) {
            return Err(parse_err(line, format!("[[quadrupolar]]: duplicate entry for spin {spin}")));
        }
        let eta = *q.eta.get_ref();
        if !(0.0..=1.0).contains(&eta) {
            return Err(parse_err(at(q.eta.span()), format!("field `eta`: {eta} outside [0, 1]")));
        }
        let wq = *q.omega_q_hz.get_ref();
        if !wq.is_finite() {
            return Err(parse_err(at(q.omega_q_hz.span()), "field `omega_q_hz`: not finite"));
        }
        quads.push(Quadrupolar { spin, omega_q_hz: wq, eta });
    }

    SpinSystem::new(spins, couplings, quads).map_err(|e| parse_err(0, e.to_string()))
}

#[derive(Serialize)]
struct SystemOut<'a> {
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    spin: &'a [Spin],
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    coupling: &'a [Coupling],
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    quadrupolar: &'a [Quadrupolar],
}

pub fn serialize_system(system: &SpinSystem) -> String {
    toml::to_string(&SystemOut {
        spin: system.spins(),
        coupling: system.couplings(),
        quadrupolar: system.quadrupolar(),
    })
    .expect("spin systems always serialize")
}

pub fn read_system_file(path: &Path) -> Result<SpinSystem> {
    parse_system(&read_text(path)?)
}

/// Reads a UTF-8 file, reporting failures as domain errors with the path.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn header_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let rest = line.strip_prefix('#')?.trim_start();
    let rest = rest.strip_prefix(key)?.trim_start();
    Some(rest.strip_prefix('=')?.trim())
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("{what}: cannot parse {tok:?} as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{what}: non-finite value {tok}")));
    }
    Ok(v)
}

/// Waveform text: `# dt=`, `# power_hz=`, `# channels=` headers, then one
/// row of multipliers per step.
pub fn write_waveform(controls: &ControlSet) -> String {
    let mut out = String::new();
    out.push_str(&format!("# dt={}\n", controls.dt()));
    out.push_str(&format!("# power_hz={}\n", controls.power_hz()));
    let chans: Vec<String> = controls.channels().iter().map(|c| c.to_string()).collect();
    out.push_str(&format!("# channels={}\n", chans.join(",")));
    for n in 0..controls.n_steps() {
        let row: Vec<String> = (0..controls.n_channels())
            .map(|k| format!("{:.16e}", controls.amplitude(k, n)))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_waveform(text: &str) -> Result<ControlSet> {
    let (mut dt, mut power, mut channels) = (None, None, None);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if let Some(v) = header_value(line, "dt") {
                dt = Some(parse_f64(v, line_no, "header `dt`")?);
            } else if let Some(v) = header_value(line, "power_hz") {
                power = Some(parse_f64(v, line_no, "header `power_hz`")?);
            } else if let Some(v) = header_value(line, "channels") {
                let chans = v
                    .split(',')
                    .map(|c| c.trim().parse::<Channel>().map_err(|e| parse_err(line_no, format!("header `channels`: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                channels = Some(chans);
            }
            continue;
        }
        let n_ch = channels
            .as_ref()
            .ok_or_else(|| parse_err(line_no, "data row before `# channels=` header"))?
            .len();
        let row = line
            .split_whitespace()
            .map(|t| parse_f64(t, line_no, "amplitude"))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != n_ch {
            return Err(parse_err(line_no, format!("row has {} values, expected {n_ch} channels", row.len())));
        }
        rows.push(row);
    }
    let dt = dt.ok_or_else(|| parse_err(0, "missing `# dt=` header"))?;
    let power = power.ok_or_else(|| parse_err(0, "missing `# power_hz=` header"))?;
    let channels = channels.ok_or_else(|| parse_err(0, "missing `# channels=` header"))?;
    if rows.is_empty() {
        return Err(parse_err(0, "waveform has no steps"));
    }
    let amps = (0..channels.len())
        .map(|k| rows.iter().map(|r| r[k]).collect())
        .collect();
    ControlSet::new(dt, power, channels, amps).map_err(|e| parse_err(0, e.to_string()))
}

/// Trajectory text: provenance and basis headers, then `time re im re im …`
/// per row.
pub fn write_trajectory(traj: &Trajectory) -> String {
    let basis = traj.basis();
    let mults: Vec<String> = basis.multiplicities().iter().map(|m| m.to_string()).collect();
    let mut out = String::with_capacity(traj.len() * basis.dim() * 48);
    out.push_str("# trajectory v1\n");
    out.push_str(&format!("# multiplicities={}\n", mults.join(",")));
    out.push_str(&format!("# system={}\n", traj.provenance.system));
    out.push_str(&format!("# controls={}\n", traj.provenance.controls));
    for (i, label) in basis.labels().iter().enumerate() {
        out.push_str(&format!("# basis {i} {label}\n"));
    }
    for (t, state) in traj.times().iter().zip(traj.states()) {
        out.push_str(&format!("{t:.16e}"));
        for c in state {
            out.push_str(&format!(" {:.16e} {:.16e}", c.re, c.im));
        }
        out.push('\n');
    }
    out
}

/// Reads a trajectory; the stored label table must match the canonical
/// ordering for the stored multiplicities.
pub fn read_trajectory(text: &str) -> Result<Trajectory> {
    let mut mults: Option<Vec<usize>> = None;
    let mut prov = Provenance::default();
    let mut labels: Vec<(usize, usize, BasisLabel)> = Vec::new();
    let mut basis: Option<Arc<ProductBasis>> = None;
    let mut times = Vec::new();
    let mut states = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if let Some(v) = header_value(line, "multiplicities") {
                let m = v
                    .split(',')
                    .map(|t| t.trim().parse::<usize>().map_err(|_| parse_err(line_no, format!("bad multiplicity {t:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                mults = Some(m);
            } else if let Some(v) = header_value(line, "system") {
                prov.system = v.to_string();
            } else if let Some(v) = header_value(line, "controls") {
                prov.controls = v.to_string();
            } else if let Some(rest) = line[1..].trim_start().strip_prefix("basis ") {
                let mut parts = rest.split_whitespace();
                let idx = parts
                    .next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(line_no, "basis entry lacks an index"))?;
                let label = parts
                    .next()
                    .ok_or_else(|| parse_err(line_no, "basis entry lacks a label"))?
                    .parse::<BasisLabel>()
                    .map_err(|e| parse_err(line_no, e.to_string()))?;
                labels.push((line_no, idx, label));
            }
            continue;
        }
        let b = match &basis {
            Some(b) => b.clone(),
            None => {
                let m = mults.as_ref().ok_or_else(|| parse_err(line_no, "data row before `# multiplicities=` header"))?;
                let b = Arc::new(ProductBasis::from_multiplicities(m).map_err(|e| parse_err(line_no, e.to_string()))?);
                check_label_table(&b, &labels)?;
                basis = Some(b.clone());
                b
            }
        };
        let vals = line
            .split_whitespace()
            .map(|t| parse_f64(t, line_no, "trajectory value"))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 1 + 2 * b.dim() {
            return Err(parse_err(
                line_no,
                format!("row has {} values, expected {} (time plus {} re/im pairs)", vals.len(), 1 + 2 * b.dim(), b.dim()),
            ));
        }
        times.push(vals[0]);
        states.push(vals[1..].chunks(2).map(|p| C64::new(p[0], p[1])).collect());
    }
    let basis = basis.ok_or_else(|| parse_err(0, "trajectory has no data rows"))?;
    let mut traj = Trajectory::new(basis, times, states).map_err(|e| parse_err(0, e.to_string()))?;
    traj.provenance = prov;
    Ok(traj)
}

fn check_label_table(basis: &ProductBasis, labels: &[(usize, usize, BasisLabel)]) -> Result<()> {
    if labels.len() != basis.dim() {
        return Err(Error::BasisMismatch(format!(
            "label table has {} entries, basis dimension is {}",
            labels.len(),
            basis.dim()
        )));
    }
    for (pos, (line, idx, label)) in labels.iter().enumerate() {
        if *idx != pos || basis.label(pos) != label {
            let canonical = basis
                .index_of(label)
                .map(|k| format!("canonical index {k}"))
                .unwrap_or_else(|| "no canonical index".into());
            return Err(Error::BasisMismatch(format!(
                "line {line}: entry {idx} is {label}, expected {} at position {pos} ({label} has {canonical})",
                basis.label(pos)
            )));
        }
    }
    Ok(())
}

/// Reads a trajectory and checks it belongs to `system`.
pub fn read_trajectory_for(text: &str, system: &SpinSystem) -> Result<Trajectory> {
    let traj = read_trajectory(text)?;
    if traj.basis().multiplicities() != system.multiplicities().as_slice() {
        return Err(Error::BasisMismatch(format!(
            "trajectory multiplicities {:?} do not match system {:?}",
            traj.basis().multiplicities(),
            system.multiplicities()
        )));
    }
    Ok(traj)
}

#[derive(Clone, Debug)]
enum Value {
    Scalar(C64),
    Op(CMat),
}

struct ExprParser<'a> {
    src: &'a str,
    pos: usize,
    system: &'a SpinSystem,
    basis: &'a ProductBasis,
}

impl<'a> ExprParser<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        domain(format!("state expression {:?} at column {}: {}", self.src, self.pos + 1, msg.into()))
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += self.peek().map_or(0, char::len_utf8);
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{c}'")))
        }
    }

    fn expr(&mut self) -> Result<Value> {
        let mut acc = if self.eat('-') {
            negate(self.term()?)
        } else {
            self.eat('+');
            self.term()?
        };
        loop {
            if self.eat('+') {
                let t = self.term()?;
                acc = self.add(acc, t)?;
            } else if self.eat('-') {
                let t = negate(self.term()?);
                acc = self.add(acc, t)?;
            } else {
                return Ok(acc);
            }
        }
    }

    fn add(&self, a: Value, b: Value) -> Result<Value> {
        match (a, b) {
            (Value::Op(x), Value::Op(y)) => Ok(Value::Op(&x + &y)),
            (Value::Scalar(x), Value::Scalar(y)) => Ok(Value::Scalar(x + y)),
            _ => Err(self.err("cannot add a bare scalar to an operator")),
        }
    }

    fn term(&mut self) -> Result<Value> {
        let mut acc = self.factor()?;
        while self.eat('*') {
            let f = self.factor()?;
            acc = match (acc, f) {
                (Value::Scalar(a), Value::Scalar(b)) => Value::Scalar(a * b),
                (Value::Scalar(a), Value::Op(m)) | (Value::Op(m), Value::Scalar(a)) => Value::Op(m.scale(a)),
                (Value::Op(a), Value::Op(b)) => Value::Op(a.matmul(&b)),
            };
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Value> {
        self.skip_ws();
        if self.eat('(') {
            let v = self.expr()?;
            self.expect(')')?;
            return Ok(v);
        }
        let c = self.peek().ok_or_else(|| self.err("unexpected end of expression"))?;
        if c.is_ascii_digit() || c == '.' {
            return self.number();
        }
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        match name {
            "i" => Ok(Value::Scalar(C64::new(0.0, 1.0))),
            "Lx" | "Ly" | "Lz" | "Lp" | "Lm" => {
                let args = self.args()?;
                if args.len() != 1 {
                    return Err(self.err(format!("{name} takes one spin argument")));
                }
                let spin = self.spin(&args[0])?;
                let which = match name {
                    "Lx" => SpinOp::X,
                    "Ly" => SpinOp::Y,
                    "Lz" => SpinOp::Z,
                    "Lp" => SpinOp::Plus,
                    _ => SpinOp::Minus,
                };
                Ok(Value::Op(embedded_spin_operator(self.basis.multiplicities(), spin, which)?))
            }
            "T" => {
                let args = self.args()?;
                if args.len() != 3 {
                    return Err(self.err("T takes (spin, l, m)"));
                }
                let spin = self.spin(&args[0])?;
                let l: usize = args[1].trim().parse().map_err(|_| self.err(format!("bad rank {:?}", args[1])))?;
                let m: i32 = args[2].trim().parse().map_err(|_| self.err(format!("bad projection {:?}", args[2])))?;
                let mut comps = vec![(0usize, 0i32); self.basis.n_spins()];
                comps[spin] = (l, m);
                let idx = self
                    .basis
                    .index_of(&BasisLabel::new(comps))
                    .ok_or_else(|| self.err(format!("T({spin},{l},{m}) is not in the basis")))?;
                Ok(Value::Op(self.basis.operator(idx)))
            }
            "" => Err(self.err(format!("unexpected character '{c}'"))),
            other => Err(self.err(format!("unknown operator {other:?}"))),
        }
    }

    fn number(&mut self) -> Result<Value> {
        let start = self.pos;
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < bytes.len() && (bytes[self.pos] == b'e' || bytes[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < bytes.len() && (bytes[self.pos] == b'+' || bytes[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text = &self.src[start..self.pos];
        let v: f64 = text.parse().map_err(|_| self.err(format!("bad number {text:?}")))?;
        if self.peek() == Some('i') && !self.src[self.pos + 1..].starts_with(|c: char| c.is_ascii_alphanumeric()) {
            self.pos += 1;
            return Ok(Value::Scalar(C64::new(0.0, v)));
        }
        Ok(Value::Scalar(C64::new(v, 0.0)))
    }

    fn args(&mut self) -> Result<Vec<String>> {
        self.expect('(')?;
        let start = self.pos;
        let end = self.src[start..]
            .find(')')
            .map(|k| start + k)
            .ok_or_else(|| self.err("missing ')'"))?;
        self.pos = end + 1;
        Ok(self.src[start..end].split(',').map(|s| s.trim().to_string()).collect())
    }

    fn spin(&self, name: &str) -> Result<usize> {
        self.system.resolve_spin(name).map_err(|e| self.err(e.to_string()))
    }
}

fn negate(v: Value) -> Value {
    match v {
        Value::Scalar(s) => Value::Scalar(-s),
        Value::Op(m) => Value::Op(-&m),
    }
}

/// A state built from an expression, plus a warning when normalisation
/// changed its norm.
#[derive(Clone, Debug)]
pub struct ParsedState {
    pub state: StateVector,
    pub warning: Option<String>,
}

/// Parses expressions such as `Lz(Ha)`, `T(0,2,2)` or `Lx(0) + 2i*Ly(1)`.
/// Spins are named by label or index; `*` between operators is the matrix
/// product. The result is scaled to unit norm.
pub fn parse_state(expr: &str, system: &SpinSystem, basis: &Arc<ProductBasis>) -> Result<ParsedState> {
    if basis.multiplicities() != system.multiplicities().as_slice() {
        return Err(domain("basis does not belong to the system"));
    }
    let mut p = ExprParser {
        src: expr,
        pos: 0,
        system,
        basis,
    };
    let v = p.expr()?;
    p.skip_ws();
    if p.pos != expr.len() {
        return Err(p.err("unexpected trailing input"));
    }
    let op = match v {
        Value::Op(m) => m,
        Value::Scalar(_) => return Err(p.err("expression is a bare scalar, not an operator")),
    };
    let raw = StateVector::from_matrix(basis.clone(), &op)?;
    let n = raw.norm();
    if n < 1e-14 {
        return Err(domain(format!("state expression {expr:?} evaluates to zero")));
    }
    let warning = ((n - 1.0).abs() > 1e-12).then(|| format!("state {expr:?} had norm {n:.6}; normalised to 1"));
    Ok(ParsedState {
        state: raw.normalized()?,
        warning,
    })
}

/// Optimisation run description.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Spin system document, relative to the config file.
    pub system: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub initial: String,
    pub target: String,
    #[serde(default = "default_parametrization")]
    pub parametrization: ParamName,
    pub dt: f64,
    pub n_steps: usize,
    pub power_hz: f64,
    pub channels: Vec<String>,
    #[serde(default = "default_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub power_penalty: f64,
    #[serde(default)]
    pub gradient: GradientName,
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ParamName {
    Amplitudes,
    Phases,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum GradientName {
    #[default]
    Exact,
    FirstOrder,
}

fn default_parametrization() -> ParamName {
    ParamName::Amplitudes
}

fn default_iterations() -> usize {
    1000
}

fn default_tolerance() -> f64 {
    1e-6
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub isotope: Option<String>,
    #[serde(default)]
    pub offsets_hz: Option<Vec<f64>>,
    /// Alternative to `offsets_hz`: `count` offsets evenly spaced over
    /// `[min, max]`.
    #[serde(default)]
    pub offset_range: Option<RangeConfig>,
    #[serde(default)]
    pub power_scales: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeConfig {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl RangeConfig {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![0.5 * (self.min + self.max)],
            n => (0..n)
                .map(|k| self.min + (self.max - self.min) * k as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Any of `corr-orders`, `coh-orders`, `local`, `involvement`.
    #[serde(default)]
    pub specs: Vec<String>,
    #[serde(default)]
    pub involvement_threshold: Option<f64>,
    #[serde(default)]
    pub compare: Vec<CompareConfig>,
}

/// A comparison of two trajectories; the path `result` names the run's
/// own trajectory.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub traj_a: String,
    pub traj_b: String,
    pub score: String,
    #[serde(default = "default_grouping")]
    pub grouping: String,
}

fn default_grouping() -> String {
    "none".into()
}

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| toml_error(text, e))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn system_path(&self) -> PathBuf {
        self.resolve(&self.system)
    }

    pub fn parametrization(&self) -> Parametrization {
        match self.problem.parametrization {
            ParamName::Amplitudes => Parametrization::Amplitudes,
            ParamName::Phases => Parametrization::Phases,
        }
    }

    pub fn gradient_mode(&self) -> GradientMode {
        match self.problem.gradient {
            GradientName::Exact => GradientMode::Exact,
            GradientName::FirstOrder => GradientMode::FirstOrder,
        }
    }

    pub fn channels(&self) -> Result<Vec<Channel>> {
        self.problem.channels.iter().map(|c| c.parse()).collect()
    }

    pub fn ensemble(&self) -> Result<Ensemble> {
        let Some(e) = &self.problem.ensemble else {
            return Ok(Ensemble::default());
        };
        let offsets = match (&e.offsets_hz, &e.offset_range) {
            (Some(_), Some(_)) => return Err(domain("ensemble: give either offsets_hz or offset_range, not both")),
            (Some(o), None) => o.clone(),
            (None, Some(r)) => r.values(),
            (None, None) => vec![0.0],
        };
        Ok(Ensemble {
            isotope: e.isotope.clone(),
            offsets_hz: offsets,
            power_scales: e.power_scales.clone().unwrap_or_else(|| vec![1.0]),
        })
    }
}

/// CSV with a `time` column followed by `columns`, full precision.
pub fn write_csv(times: &[f64], names: &[String], columns: &[&[f64]]) -> String {
    let mut out = String::from("time");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (t, &time) in times.iter().enumerate() {
        out.push_str(&format!("{time:e}"));
        for c in columns {
            out.push_str(&format!(",{:e}", c[t]));
        }
        out.push('\n');
    }
    out
}

/// Parses a CSV written by [`write_csv`] into header and rows.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(0, "empty CSV"))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let rows = lines
        .map(|(i, l)| {
            let row = l
                .split(',')
                .map(|t| parse_f64(t.trim(), i + 1, "CSV value"))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != names.len() {
                return Err(parse_err(i + 1, format!("row has {} fields, header has {}", row.len(), names.len())));
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((names, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::Axis;

    pub(crate) const BACKBONE: &str = r#"
[[spin]]
label = "Ha"
isotope = "1H"
offset_hz = 0.0

[[spin]]
label = "Ca"
isotope = "13C"
offset_hz = 0.0

[[spin]]
label = "C'"
isotope = "13C"
offset_hz = 11000.0

[[coupling]]
i = "Ha"
j = "Ca"
j_hz = 140.0
model = "weak"

[[coupling]]
i = 1
j = 2
j_hz = 55.0
model = "strong"
"#;

    #[test]
    fn minimal_system() {
        let s = parse_system("[[spin]]\nisotope = \"1H\"\noffset_hz = 0\n").unwrap();
        assert_eq!(s.n_spins(), 1);
        assert_eq!(ProductBasis::new(&s).dim(), 4);
    }

    #[test]
    fn backbone_round_trip() {
        let s = parse_system(BACKBONE).unwrap();
        assert_eq!(s.n_spins(), 3);
        assert_eq!(s.couplings().len(), 2);
        assert_eq!(s.resolve_spin("C'").unwrap(), 2);
        let text = serialize_system(&s);
        let back = parse_system(&text).unwrap();
        assert_eq!(s, back);
        assert_eq!(text, serialize_system(&back));
    }

    #[test]
    fn system_errors_name_line_and_field() {
        let dup = format!("{BACKBONE}\n[[coupling]]\ni = 0\nj = 1\nj_hz = 3.0\n");
        match parse_system(&dup) {
            Err(Error::Parse { line, message }) => {
                assert!(message.contains("duplicate"), "{message}");
                assert_eq!(line, dup.lines().position(|l| l == "i = 0").unwrap());
            }
            other => panic!("{other:?}"),
        }
        let bad_eta = "[[spin]]\nisotope = \"2H\"\noffset_hz = 0\n[[quadrupolar]]\nspin = 0\nomega_q_hz = 1e4\neta = 1.5\n";
        match parse_system(bad_eta) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 7);
                assert!(message.contains("eta"));
            }
            other => panic!("{other:?}"),
        }
        let bad_index = "[[spin]]\nisotope = \"1H\"\noffset_hz = 0\n[[spin]]\nisotope = \"1H\"\noffset_hz = 0\n[[coupling]]\ni = 0\nj = 5\nj_hz = 1\n";
        match parse_system(bad_index) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 9);
                assert!(message.contains("`j`"));
            }
            other => panic!("{other:?}"),
        }
        let unknown = "[[spin]]\nisotope = \"1H\"\noffset = 0\n";
        assert!(matches!(parse_system(unknown), Err(Error::Parse { line: 3, .. })));
        let quad_on_half = "[[spin]]\nisotope = \"1H\"\noffset_hz = 0\n[[quadrupolar]]\nspin = 0\nomega_q_hz = 1\neta = 0\n";
        assert!(parse_system(quad_on_half).is_err());
        assert!(parse_system("[[spin]]\nisotope = \"99Xx\"\noffset_hz = 0\n").is_err());
    }

    fn xy() -> Vec<Channel> {
        vec![Channel::new("1H", Axis::X), Channel::new("1H", Axis::Y)]
    }

    #[test]
    fn waveform_round_trip_is_exact() {
        let n = 625;
        let amps = vec![
            (0..n).map(|k| (k as f64 * 0.37).cos()).collect(),
            (0..n).map(|k| (k as f64 * 0.37).sin() / 3.0).collect(),
        ];
        let c = ControlSet::new(1.6e-6, 15000.0, xy(), amps).unwrap();
        let text = write_waveform(&c);
        let back = read_waveform(&text).unwrap();
        assert_eq!(c, back);
        assert_eq!(text, write_waveform(&back));
    }

    #[test]
    fn waveform_errors() {
        let head = "# dt=1e-6\n# power_hz=15000\n# channels=1H:x,1H:y\n";
        assert!(read_waveform(head).is_err());
        assert!(matches!(read_waveform(&format!("{head}1 0\n0.5\n")), Err(Error::Parse { line: 5, .. })));
        assert!(read_waveform(&format!("{head}NaN 0\n")).is_err());
        assert!(read_waveform(&format!("{head}inf 0\n")).is_err());
        assert!(read_waveform("# power_hz=1\n# channels=1H:x\n1\n").is_err());
        let ok = read_waveform(&format!("{head}1 0\n0 1\n")).unwrap();
        assert_eq!(ok.n_steps(), 2);
        assert_eq!(ok.power_hz(), 15000.0);
    }

    fn sample_trajectory(mults: &[usize], n: usize) -> Trajectory {
        let b = Arc::new(ProductBasis::from_multiplicities(mults).unwrap());
        let states = (0..n)
            .map(|t| {
                (0..b.dim())
                    .map(|i| C64::new(((t * 7 + i) as f64).sin() / 9.0, ((t + 3 * i) as f64).cos() * 1e-3))
                    .collect()
            })
            .collect();
        let mut traj = Trajectory::new(b, (0..n).map(|t| t as f64 * 2e-5).collect(), states).unwrap();
        traj.provenance = Provenance {
            system: "abc".into(),
            controls: "def".into(),
        };
        traj
    }

    #[test]
    fn trajectory_round_trip() {
        let traj = sample_trajectory(&[2, 2, 2], 1001);
        let back = read_trajectory(&write_trajectory(&traj)).unwrap();
        assert_eq!(traj.times(), back.times());
        assert_eq!(traj.states(), back.states());
        assert_eq!(traj.provenance, back.provenance);
    }

    #[test]
    fn foreign_basis_order_is_rejected() {
        let text = write_trajectory(&sample_trajectory(&[2, 2], 2));
        let swapped = text
            .replace("# basis 1 (0,0)(1,-1)", "# basis 1 TMP")
            .replace("# basis 2 (0,0)(1,0)", "# basis 1 (0,0)(1,-1)")
            .replace("# basis 1 TMP", "# basis 2 (0,0)(1,0)");
        assert_ne!(text, swapped);
        assert!(matches!(read_trajectory(&swapped), Err(Error::BasisMismatch(_))));
        let sys = SpinSystem::uncoupled(&[("1H", 0.0)]).unwrap();
        assert!(matches!(read_trajectory_for(&text, &sys), Err(Error::BasisMismatch(_))));
    }

    #[test]
    fn state_expressions() {
        let sys = parse_system(BACKBONE).unwrap();
        let b = Arc::new(ProductBasis::new(&sys));
        let lz = parse_state("Lz(Ha)", &sys, &b).unwrap();
        assert!((lz.state.norm() - 1.0).abs() < 1e-14);
        let t = parse_state("T(0,1,0)", &sys, &b).unwrap();
        assert!(t.warning.is_none());
        assert!((lz.state.inner(&t.state).unwrap().re - 1.0).abs() < 1e-14);

        let sum = parse_state("Lx(Ca) + 2i*Ly(C')", &sys, &b).unwrap();
        assert!(sum.warning.is_some());
        assert!((sum.state.norm() - 1.0).abs() < 1e-14);

        let prod = parse_state("2*Lz(0)*Lz(1)", &sys, &b).unwrap();
        let idx = b.index_of(&BasisLabel::new(vec![(1, 0), (1, 0), (0, 0)])).unwrap();
        assert!((prod.state.coefficients()[idx].re - 1.0).abs() < 1e-14);

        let neg = parse_state("-(Lz(2))", &sys, &b).unwrap();
        assert!(neg.state.coefficients().iter().any(|c| (c.re + 1.0).abs() < 1e-14));

        for bad in ["Lz(Hb)", "Lq(0)", "Lz(0) +", "2", "Lz(0) - Lz(0)", "T(0,2,0)", "Lz(0) + 1"] {
            assert!(parse_state(bad, &sys, &b).is_err(), "{bad}");
        }
    }

    #[test]
    fn experiment_config() {
        let text = r#"
system = "systems/one.toml"
seed = 3

[problem]
initial = "Lz(0)"
target = "Lx(0)"
parametrization = "phases"
dt = 1.6e-6
n_steps = 625
power_hz = 15000
channels = ["1H:x", "1H:y"]

[problem.ensemble]
isotope = "1H"
offset_range = { min = -25000, max = 25000, count = 25 }
power_scales = [0.7, 0.85, 1.0, 1.15, 1.3]

[analysis]
specs = ["local"]
"#;
        let cfg = ExperimentConfig::parse(text, Path::new("/data")).unwrap();
        assert_eq!(cfg.system_path(), PathBuf::from("/data/systems/one.toml"));
        assert_eq!(cfg.parametrization(), Parametrization::Phases);
        let e = cfg.ensemble().unwrap();
        assert_eq!(e.offsets_hz.len(), 25);
        assert_eq!(e.offsets_hz[0], -25000.0);
        assert_eq!(e.offsets_hz[12], 0.0);
        assert_eq!(e.offsets_hz[24], 25000.0);
        assert_eq!(cfg.problem.max_iterations, 1000);
        assert_eq!(cfg.channels().unwrap().len(), 2);

        let no_seed = text.replace("seed = 3\n", "");
        match ExperimentConfig::parse(&no_seed, Path::new(".")) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("seed"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let times = [0.0, 1e-3, 2e-3];
        let a = [1.0, 0.5, 0.25];
        let text = write_csv(&times, &["corr_order_1".into()], &[&a]);
        assert!(text.starts_with("time,corr_order_1\n"));
        let (names, rows) = read_csv(&text).unwrap();
        assert_eq!(names, vec!["time", "corr_order_1"]);
        assert_eq!(rows[2], vec![2e-3, 0.25]);
    }
}
