use std::collections::HashMap;

use super::{
    is_ground, Analysis, DeviceStmt, Element, IcStmt, NetlistDoc, NetlistError, NodeDecl, ScheduleEntry,
    SolverOverrides, SourceValue, Span, TxNetStmt,
};
use crate::devices::{InputSlot, OutputSlot, Units};

const MOTOR_KEYS: [&str; 9] = ["rs", "rr", "lls", "llr", "lm", "h", "tl", "rating", "wb"];

#[derive(Debug, Clone, Copy)]
struct Tok<'a> {
    text: &'a str,
    span: Span,
}

fn tokenize(line: &str, line_no: usize) -> Vec<Tok<'_>> {
    let body = line.split('#').next().unwrap_or("");
    let mut toks = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    let mut col = 0;
    for (byte, ch) in body.char_indices() {
        col += 1;
        if ch.is_whitespace() {
            if let Some((b, c)) = start.take() {
                toks.push(Tok {
                    text: &body[b..byte],
                    span: Span { line: line_no, col: c },
                });
            }
        } else if start.is_none() {
            start = Some((byte, col));
        }
    }
    if let Some((b, c)) = start {
        toks.push(Tok {
            text: &body[b..],
            span: Span { line: line_no, col: c },
        });
    }
    toks
}

fn err(tok: &Tok<'_>, message: impl Into<String>) -> NetlistError {
    NetlistError::Parse {
        span: tok.span,
        message: message.into(),
        token: tok.text.to_string(),
    }
}

fn number(tok: &Tok<'_>, text: &str, col_shift: usize) -> Result<f64, NetlistError> {
    let at = Tok {
        text,
        span: Span {
            line: tok.span.line,
            col: tok.span.col + col_shift,
        },
    };
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(err(&at, "expected a finite number")),
    }
}

/// A `key=value` token with the value's position.
struct Param<'a> {
    key: String,
    value: &'a str,
    tok: Tok<'a>,
    value_col: usize,
}

impl<'a> Param<'a> {
    fn value_tok(&self) -> Tok<'a> {
        Tok {
            text: self.value,
            span: Span {
                line: self.tok.span.line,
                col: self.value_col,
            },
        }
    }

    fn number(&self) -> Result<f64, NetlistError> {
        number(&self.tok, self.value, self.value_col - self.tok.span.col)
    }

    fn positive(&self) -> Result<f64, NetlistError> {
        let v = self.number()?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(err(&self.value_tok(), format!("`{}` must be positive", self.key)))
        }
    }
}

fn is_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '.' | '-' | '[' | ']' | ':'))
}

fn source_value(tok: &Tok<'_>, text: &str, shift: usize) -> Result<SourceValue, NetlistError> {
    let lower = text.to_ascii_lowercase();
    if let Some(idx) = lower.strip_prefix('u') {
        return idx.parse().map(SourceValue::Input).map_err(|_| {
            err(
                &Tok {
                    text,
                    span: Span {
                        line: tok.span.line,
                        col: tok.span.col + shift,
                    },
                },
                "expected an input reference u<k>",
            )
        });
    }
    number(tok, text, shift).map(SourceValue::Const)
}

/// Positional arguments followed by `key=value` parameters.
struct Stmt<'a> {
    keyword: Tok<'a>,
    positional: Vec<Tok<'a>>,
    params: Vec<Param<'a>>,
}

impl<'a> Stmt<'a> {
    fn split(toks: &[Tok<'a>]) -> Result<Self, NetlistError> {
        let keyword = toks[0];
        let mut positional = Vec::new();
        let mut params: Vec<Param<'a>> = Vec::new();
        for tok in &toks[1..] {
            match tok.text.split_once('=') {
                Some((k, v)) => {
                    if k.is_empty() || v.is_empty() {
                        return Err(err(tok, "expected key=value"));
                    }
                    let key = k.to_ascii_lowercase();
                    if params.iter().any(|p| p.key == key) {
                        return Err(err(tok, format!("duplicate parameter `{key}`")));
                    }
                    params.push(Param {
                        key,
                        value: v,
                        tok: *tok,
                        value_col: tok.span.col + k.chars().count() + 1,
                    });
                }
                None if params.is_empty() => positional.push(*tok),
                None => return Err(err(tok, "positional argument after parameters")),
            }
        }
        Ok(Self {
            keyword,
            positional,
            params,
        })
    }

    fn expect_positional(&self, n: usize, usage: &str) -> Result<(), NetlistError> {
        if self.positional.len() > n {
            return Err(err(&self.positional[n], format!("unexpected argument; usage: {usage}")));
        }
        if self.positional.len() < n {
            let at = self.positional.last().unwrap_or(&self.keyword);
            return Err(err(at, format!("too few arguments; usage: {usage}")));
        }
        Ok(())
    }

    fn allow_keys(&self, keys: &[&str]) -> Result<(), NetlistError> {
        match self.params.iter().find(|p| !keys.contains(&p.key.as_str())) {
            Some(p) => Err(err(&p.tok, format!("unknown parameter `{}`", p.key))),
            None => Ok(()),
        }
    }

    fn get(&self, key: &str) -> Option<&Param<'a>> {
        self.params.iter().find(|p| p.key == key)
    }

    fn require(&self, key: &str) -> Result<&Param<'a>, NetlistError> {
        self.get(key)
            .ok_or_else(|| err(&self.keyword, format!("missing parameter `{key}=`")))
    }
}

#[derive(Default)]
struct Builder {
    units: Option<(Units, Span)>,
    nodes: Vec<NodeDecl>,
    node_index: HashMap<String, Span>,
    devices: Vec<DeviceStmt>,
    device_index: HashMap<String, Span>,
    txnets: Vec<TxNetStmt>,
    schedule: Vec<ScheduleEntry>,
    ics: Vec<IcStmt>,
    analysis: Option<Analysis>,
    solver: Option<SolverOverrides>,
}

impl Builder {
    fn statement(&mut self, toks: &[Tok<'_>]) -> Result<(), NetlistError> {
        let kw = toks[0].text.to_ascii_lowercase();
        let st = Stmt::split(toks)?;
        match kw.as_str() {
            "units" => self.units(&st),
            "node" => self.node(&st),
            "resistor" | "capacitor" | "inductor" | "vsource" | "isource" | "diode" | "mosfet" | "pqload" | "motor"
            | "nndevice" => self.device(&kw, &st),
            "txnet" => self.txnet(&st),
            "uschedule" => self.uschedule(&st),
            "analysis" => self.analysis(&st),
            "solver" => self.solver(&st),
            "ic" => self.ic(&st),
            _ => Err(err(&toks[0], format!("unknown statement `{}`", toks[0].text))),
        }
    }

    fn units(&mut self, st: &Stmt<'_>) -> Result<(), NetlistError> {
        st.expect_positional(1, "units si|pu")?;
        st.allow_keys(&[])?;
        if self.units.is_some() {
            return Err(err(&st.keyword, "units declared twice"));
        }
        let tok = &st.positional[0];
        let u = match tok.text.to_ascii_lowercase().as_str() {
            "si" => Units::Si,
            "pu" => Units::PerUnit,
            _ => return Err(err(tok, "expected `si` or `pu`")),
        };
        self.units = Some((u, st.keyword.span));
        Ok(())
    }

    fn node(&mut self, st: &Stmt<'_>) -> Result<(), NetlistError> {
        st.expect_positional(1, "node <name>")?;
        st.allow_keys(&[])?;
        let tok = &st.positional[0];
        if is_ground(tok.text) {
            return Err(err(tok, "ground is implicit and cannot be declared"));
        }
        if !is_name(tok.text) {
            return Err(err(tok, "invalid node name"));
        }
        let key = tok.text.to_ascii_lowercase();
        if self.node_index.contains_key(&key) {
            return Err(NetlistError::DuplicateNode {
                span: tok.span,
                name: tok.text.to_string(),
            });
        }
        self.node_index.insert(key, tok.span);
        self.nodes.push(NodeDecl {
            name: tok.text.to_string(),
            span: tok.span,
        });
        Ok(())
    }

    fn device(&mut self, kw: &str, st: &Stmt<'_>) -> Result<(), NetlistError> {
        let (n_nodes, usage): (Option<usize>, &str) = match kw {
            "resistor" | "capacitor" | "inductor" => (Some(2), "<name> <n+> <n-> <value>"),
            "vsource" => (Some(2), "vsource <name> <n+> <n-> <value|u<k>> [angle=]"),
            "isource" => (Some(2), "isource <name> <n+> <n-> <value|u<k>>"),
            "diode" => (Some(2), "diode <name> <n+> <n-> is= vt="),
            "mosfet" => (Some(3), "mosfet <name> <d> <g> <s> k= vth= [lambda=]"),
            "pqload" => (Some(1), "pqload <name> <node> p= q="),
            "motor" => (
                Some(1),
                "motor <name> <node> [rs= rr= lls= llr= lm= h= tl= rating= wb=]",
            ),
            _ => (None, "nndevice <name> <node>... model= inputs= [outputs=]"),
        };
        let Some(name_tok) = st.positional.first() else {
            return Err(err(&st.keyword, format!("missing device name; usage: {usage}")));
        };
        if !is_name(name_tok.text) || is_ground(name_tok.text) {
            return Err(err(name_tok, "invalid device name"));
        }
        let has_value = matches!(kw, "resistor" | "capacitor" | "inductor" | "vsource" | "isource");
        let n_pos = match n_nodes {
            Some(n) => {
                let total = 1 + n + usize::from(has_value);
                st.expect_positional(total, usage)?;
                total
            }
            None => {
                if st.positional.len() < 2 {
                    return Err(err(name_tok, format!("too few arguments; usage: {usage}")));
                }
                st.positional.len()
            }
        };
        let node_toks = &st.positional[1..n_pos - usize::from(has_value)];
        for t in node_toks {
            if !is_name(t.text) {
                return Err(err(t, "invalid node name"));
            }
        }
        let value_tok = has_value.then(|| st.positional[n_pos - 1]);
        let positive_value = |t: &Tok<'_>| -> Result<f64, NetlistError> {
            let v = number(t, t.text, 0)?;
            if v > 0.0 {
                Ok(v)
            } else {
                Err(err(t, "value must be positive"))
            }
        };

        let element = match kw {
            "resistor" | "capacitor" | "inductor" => {
                st.allow_keys(&[])?;
                let v = positive_value(&value_tok.unwrap())?;
                match kw {
                    "resistor" => Element::Resistor(v),
                    "capacitor" => Element::Capacitor(v),
                    _ => Element::Inductor(v),
                }
            }
            "vsource" => {
                st.allow_keys(&["angle"])?;
                let t = value_tok.unwrap();
                let value = source_value(&t, t.text, 0)?;
                let angle = match st.get("angle") {
                    Some(p) => Some(source_value(&p.tok, p.value, p.value_col - p.tok.span.col)?),
                    None => None,
                };
                Element::VSource { value, angle }
            }
            "isource" => {
                st.allow_keys(&[])?;
                let t = value_tok.unwrap();
                Element::ISource(source_value(&t, t.text, 0)?)
            }
            "diode" => {
                st.allow_keys(&["is", "vt"])?;
                Element::Diode {
                    i_sat: st.require("is")?.positive()?,
                    v_thermal: st.require("vt")?.positive()?,
                }
            }
            "mosfet" => {
                st.allow_keys(&["k", "vth", "lambda"])?;
                let lambda = match st.get("lambda") {
                    Some(p) => {
                        let l = p.number()?;
                        if l < 0.0 {
                            return Err(err(&p.value_tok(), "`lambda` must be non-negative"));
                        }
                        Some(l)
                    }
                    None => None,
                };
                Element::Mosfet {
                    k: st.require("k")?.positive()?,
                    v_th: st.require("vth")?.number()?,
                    lambda,
                }
            }
            "pqload" => {
                st.allow_keys(&["p", "q"])?;
                Element::PqLoad {
                    p: st.require("p")?.number()?,
                    q: st.require("q")?.number()?,
                }
            }
            "motor" => {
                st.allow_keys(&MOTOR_KEYS)?;
                let mut params = Vec::new();
                for p in &st.params {
                    let v = if p.key == "tl" { p.number()? } else { p.positive()? };
                    params.push((p.key.clone(), v));
                }
                Element::Motor(params)
            }
            _ => {
                st.allow_keys(&["model", "inputs", "outputs"])?;
                let model = st.require("model")?.value.to_string();
                let inputs = slot_list::<InputSlot>(st.require("inputs")?)?;
                let outputs = match st.get("outputs") {
                    Some(p) => Some(slot_list::<OutputSlot>(p)?),
                    None => None,
                };
                Element::NnDevice { model, inputs, outputs }
            }
        };

        let key = name_tok.text.to_ascii_lowercase();
        if self.device_index.contains_key(&key) {
            return Err(err(name_tok, format!("duplicate device name `{}`", name_tok.text)));
        }
        self.device_index.insert(key, name_tok.span);
        self.devices.push(DeviceStmt {
            name: name_tok.text.to_string(),
            nodes: node_toks.iter().map(|t| t.text.to_string()).collect(),
            element,
            span: st.keyword.span,
            node_spans: node_toks.iter().map(|t| t.span).collect(),
        });
        Ok(())
    }

    fn txnet(&mut self, st: &Stmt<'_>) -> Result<(), NetlistError> {
        st.allow_keys(&[])?;
        let Some(file) = st.positional.first() else {
            return Err(err(&st.keyword, "missing file; usage: txnet <file> [nodes...]"));
        };
        for t in &st.positional[1..] {
            if !is_name(t.text) || is_ground(t.text) {
                return Err(err(t, "invalid bus name"));
            }
        }
        self.txnets.push(TxNetStmt {
            file: file.text.to_string(),
            nodes: st.positional[1..].iter().map(|t| t.text.to_string()).collect(),
            span: file.span,
        });
        Ok(())
    }

    fn uschedule(&mut self, st: &Stmt<'_>) -> Result<(), NetlistError> {
        st.allow_keys(&[])?;
        if st.positional.len() < 2 {
            let at = st.positional.last().unwrap_or(&st.keyword);
            return Err(err(at, "usage: uschedule <t> <u0> [u1...]"));
        }
        let t_tok = &st.positional[0];
        let t = number(t_tok, t_tok.text, 0)?;
        if t < 0.0 {
            return Err(err(t_tok, "schedule time must be non-negative"));
        }
        let values = st.positional[1..]
            .iter()
            .map(|v| number(v, v.text, 0))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(first) = self.schedule.first() {
            if first.values.len() != values.len() {
                return Err(err(
                    &st.keyword,
                    format!(
                        "schedule width {} differs from earlier width {}",
                        values.len(),
                        first.values.len()
                    ),
                ));
            }
        }
        if self.schedule.iter().any(|e| e.t == t) {
            return Err(err(t_tok, "duplicate schedule time"));
        }
        self.schedule.push(ScheduleEntry {
            t,
            values,
            span: st.keyword.span,
        });
        Ok(())
    }

    fn analysis(&mut self, st: &Stmt<'_>) -> Result<(), NetlistError> {
        if self.analysis.is_some() {
            return Err(err(&st.keyword, "second analysis directive"));
        }
        let Some(kind) = st.positional.first() else {
            return Err(err(&st.keyword, "usage: analysis dc | analysis tran dt=<s> tend=<s>"));
        };
        let a = match kind.text.to_ascii_lowercase().as_str() {
            "dc" => {
                st.expect_positional(1, "analysis dc")?;
                st.allow_keys(&[])?;
                Analysis::Dc
            }
            "tran" => {
                st.expect_positional(1, "analysis tran dt=<s> tend=<s>")?;
                st.allow_keys(&["dt", "tend"])?;
                let dt = st.require("dt")?.positive()?;
                let tend_p = st.require("tend")?;
                let t_end = tend_p.number()?;
                if t_end < dt {
                    return Err(err(&tend_p.value_tok(), "tend must be at least dt"));
                }
                Analysis::Tran { dt, t_end }
            }
            _ => return Err(err(kind, "expected `dc` or `tran`")),
        };
        self.analysis = Some(a);
        Ok(())
    }

    fn solver(&mut self, st: &Stmt<'_>) -> Result<(), NetlistError> {
        st.expect_positional(0, "solver alpha= eps= maxiter= halving=on|off")?;
        st.allow_keys(&["alpha", "eps", "maxiter", "halving"])?;
        if self.solver.is_some() {
            return Err(err(&st.keyword, "solver settings given twice"));
        }
        let mut s = SolverOverrides::default();
        if let Some(p) = st.get("alpha") {
            let a = p.number()?;
            if !(a > 0.0 && a <= 1.0) {
                return Err(err(&p.value_tok(), "alpha must lie in (0, 1]"));
            }
            s.alpha = Some(a);
        }
        if let Some(p) = st.get("eps") {
            s.eps = Some(p.positive()?);
        }
        if let Some(p) = st.get("maxiter") {
            match p.value.parse::<usize>() {
                Ok(n) if n >= 1 => s.max_iter = Some(n),
                _ => return Err(err(&p.value_tok(), "maxiter must be a positive integer")),
            }
        }
        if let Some(p) = st.get("halving") {
            s.halving = Some(match p.value.to_ascii_lowercase().as_str() {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                _ => return Err(err(&p.value_tok(), "halving must be on or off")),
            });
        }
        self.solver = Some(s);
        Ok(())
    }

    fn ic(&mut self, st: &Stmt<'_>) -> Result<(), NetlistError> {
        st.allow_keys(&[])?;
        if st.positional.len() < 2 {
            let at = st.positional.last().unwrap_or(&st.keyword);
            return Err(err(at, "usage: ic <node|device> <value>..."));
        }
        let target = &st.positional[0];
        let values = st.positional[1..]
            .iter()
            .map(|v| number(v, v.text, 0))
            .collect::<Result<Vec<_>, _>>()?;
        if self.ics.iter().any(|ic| ic.target.eq_ignore_ascii_case(target.text)) {
            return Err(err(target, "duplicate initial condition"));
        }
        self.ics.push(IcStmt {
            target: target.text.to_string(),
            values,
            span: target.span,
        });
        Ok(())
    }

    fn finish(self) -> Result<NetlistDoc, NetlistError> {
        let units = self.units.map_or(Units::Si, |u| u.0);
        let known = |n: &str| is_ground(n) || self.node_index.contains_key(&n.to_ascii_lowercase());
        for d in &self.devices {
            for (n, span) in d.nodes.iter().zip(&d.node_spans) {
                if !known(n) {
                    return Err(NetlistError::UnknownNode {
                        span: *span,
                        name: n.clone(),
                    });
                }
            }
            if !d.element.allowed(units) {
                return Err(NetlistError::UnitMismatch {
                    span: d.span,
                    device: d.element.keyword().into(),
                    name: d.name.clone(),
                    units: if units == Units::Si { "si" } else { "pu" }.into(),
                });
            }
        }
        for t in &self.txnets {
            if units != Units::PerUnit {
                return Err(NetlistError::UnitMismatch {
                    span: t.span,
                    device: "txnet".into(),
                    name: t.file.clone(),
                    units: "si".into(),
                });
            }
            if let Some(n) = t.nodes.iter().find(|n| !known(n)) {
                return Err(NetlistError::UnknownNode {
                    span: t.span,
                    name: n.clone(),
                });
            }
        }
        let width = units.components();
        for ic in &self.ics {
            let lower = ic.target.to_ascii_lowercase();
            if self.node_index.contains_key(&lower) {
                if ic.values.len() != width {
                    return Err(NetlistError::Invalid {
                        span: ic.span,
                        message: format!("node initial condition needs {width} value(s)"),
                    });
                }
            } else if !self.device_index.contains_key(&lower) {
                return Err(NetlistError::UnknownNode {
                    span: ic.span,
                    name: ic.target.clone(),
                });
            }
        }
        let analysis = self.analysis.ok_or(NetlistError::MissingAnalysis)?;
        Ok(NetlistDoc {
            units,
            nodes: self.nodes,
            devices: self.devices,
            txnets: self.txnets,
            schedule: self.schedule,
            ics: self.ics,
            analysis,
            solver: self.solver.unwrap_or_default(),
        })
    }
}

fn slot_list<T: std::str::FromStr<Err = String>>(p: &Param<'_>) -> Result<Vec<T>, NetlistError> {
    let mut col = p.value_col;
    let mut out = Vec::new();
    for piece in p.value.split(',') {
        let tok = Tok {
            text: piece,
            span: Span {
                line: p.tok.span.line,
                col,
            },
        };
        out.push(piece.parse::<T>().map_err(|m| err(&tok, m))?);
        col += piece.chars().count() + 1;
    }
    Ok(out)
}

/// Parses a full document, stopping at the first error.
pub fn parse(text: &str) -> Result<NetlistDoc, NetlistError> {
    let mut b = Builder::default();
    for (i, line) in text.lines().enumerate() {
        let toks = tokenize(line, i + 1);
        if !toks.is_empty() {
            b.statement(&toks)?;
        }
    }
    b.finish()
}
