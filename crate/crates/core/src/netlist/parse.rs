//! Line-oriented netlist reader.
//!
//! ```text
//! * comment
//! .title Half-wave rectifier
//! Vin in 0 SIN(10 50 0)
//! D1 in out IS=1e-12 N=1 VT=25.85m
//! R1 out 0 100
//! C1 out 0 1m
//! .tran 10u 0.1
//! .sens 0.08 0.1 v(out)
//! .end
//! ```

use super::{
    Device, DiodeModel, Directives, Element, ElementKind, Netlist, NetlistError, Result,
    SensDirective, SwitchModel, TranDirective,
};
use crate::waveform::{Pwm, Waveform};

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    Word(&'a str),
    Open,
    Close,
}

#[derive(Debug, Clone)]
struct Token<'a> {
    tok: Tok<'a>,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        let sep = c.is_whitespace() || c == ',' || c == '(' || c == ')';
        if sep {
            if let Some(s) = start.take() {
                out.push(Token {
                    tok: Tok::Word(&line[s..i]),
                    column: s + 1,
                });
            }
            match c {
                '(' => out.push(Token {
                    tok: Tok::Open,
                    column: i + 1,
                }),
                ')' => out.push(Token {
                    tok: Tok::Close,
                    column: i + 1,
                }),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Token {
            tok: Tok::Word(&line[s..]),
            column: s + 1,
        });
    }
    out
}

/// Parses a number with an optional SPICE scale suffix (`f p n u m k meg g t`).
/// Letters after the suffix are treated as a unit and ignored, as in SPICE.
pub fn parse_value(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut end = 0;
    if end < bytes.len() && (bytes[end] == b'+' || bytes[end] == b'-') {
        end += 1;
    }
    let digits_start = end;
    while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
        end += 1;
    }
    if end == digits_start {
        return None;
    }
    if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
        let mut j = end + 1;
        if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
            j += 1;
        }
        let exp_digits = j;
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            j += 1;
        }
        if j > exp_digits {
            end = j;
        }
    }
    let mantissa: f64 = text[..end].parse().ok()?;
    let rest = text[end..].to_ascii_lowercase();
    let scale = if rest.starts_with("meg") {
        1e6
    } else {
        match rest.chars().next() {
            None => 1.0,
            Some('f') => 1e-15,
            Some('p') => 1e-12,
            Some('n') => 1e-9,
            Some('u') | Some('µ') => 1e-6,
            Some('m') => 1e-3,
            Some('k') => 1e3,
            Some('g') => 1e9,
            Some('t') => 1e12,
            Some(c) if c.is_alphabetic() => 1.0,
            Some(_) => return None,
        }
    };
    if !rest.chars().all(|c| c.is_alphabetic()) {
        return None;
    }
    Some(mantissa * scale)
}

struct LineCtx {
    line: usize,
    len: usize,
}

impl LineCtx {
    fn err(&self, column: usize, message: impl Into<String>) -> NetlistError {
        NetlistError::Syntax {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn eol(&self) -> usize {
        self.len + 1
    }
}

fn word<'a>(ctx: &LineCtx, toks: &[Token<'a>], i: usize, what: &str) -> Result<(&'a str, usize)> {
    match toks.get(i) {
        Some(Token {
            tok: Tok::Word(w),
            column,
        }) => Ok((w, *column)),
        Some(t) => Err(ctx.err(t.column, format!("expected {what}"))),
        None => Err(ctx.err(ctx.eol(), format!("missing {what}"))),
    }
}

fn number(ctx: &LineCtx, toks: &[Token<'_>], i: usize, what: &str) -> Result<f64> {
    let (w, col) = word(ctx, toks, i, what)?;
    parse_value(w).ok_or_else(|| ctx.err(col, format!("invalid number '{w}' for {what}")))
}

fn no_trailing(ctx: &LineCtx, toks: &[Token<'_>], i: usize) -> Result<()> {
    match toks.get(i) {
        Some(t) => Err(ctx.err(t.column, "unexpected trailing input")),
        None => Ok(()),
    }
}

/// Reads `NAME ( a b c ... )` and returns the numeric arguments.
fn call_args(ctx: &LineCtx, toks: &[Token<'_>], i: usize, name: &str) -> Result<(Vec<f64>, usize)> {
    let open = toks
        .get(i)
        .ok_or_else(|| ctx.err(ctx.eol(), format!("expected '(' after {name}")))?;
    if open.tok != Tok::Open {
        return Err(ctx.err(open.column, format!("expected '(' after {name}")));
    }
    let mut args = Vec::new();
    let mut j = i + 1;
    loop {
        match toks.get(j) {
            None => return Err(ctx.err(ctx.eol(), format!("unterminated {name}(...)"))),
            Some(Token {
                tok: Tok::Close, ..
            }) => return Ok((args, j + 1)),
            Some(_) => {
                args.push(number(ctx, toks, j, &format!("{name} argument"))?);
                j += 1;
            }
        }
    }
}

fn waveform(ctx: &LineCtx, toks: &[Token<'_>], i: usize) -> Result<Waveform> {
    let (head, col) = word(ctx, toks, i, "source value")?;
    let upper = head.to_ascii_uppercase();
    let (wave, next) = match upper.as_str() {
        "DC" => (Waveform::Dc(number(ctx, toks, i + 1, "DC level")?), i + 2),
        "SIN" => {
            let (a, next) = call_args(ctx, toks, i + 1, "SIN")?;
            if !(2..=3).contains(&a.len()) {
                return Err(ctx.err(col, "SIN takes (amplitude frequency [phase])"));
            }
            (
                Waveform::Sine {
                    amplitude: a[0],
                    frequency: a[1],
                    phase: a.get(2).copied().unwrap_or(0.0),
                },
                next,
            )
        }
        "PWM" => {
            let (a, next) = call_args(ctx, toks, i + 1, "PWM")?;
            if !(6..=7).contains(&a.len()) {
                return Err(ctx.err(col, "PWM takes (low high period duty rise fall [delay])"));
            }
            (
                Waveform::Pwm(Pwm {
                    low: a[0],
                    high: a[1],
                    period: a[2],
                    duty: a[3],
                    rise: a[4],
                    fall: a[5],
                    delay: a.get(6).copied().unwrap_or(0.0),
                }),
                next,
            )
        }
        _ => match parse_value(head) {
            Some(v) => (Waveform::Dc(v), i + 1),
            None => return Err(ctx.err(col, format!("unknown source specification '{head}'"))),
        },
    };
    no_trailing(ctx, toks, next)?;
    Ok(wave)
}

/// Parses `KEY=VALUE` words starting at `i` against the allowed keys.
fn key_values(
    ctx: &LineCtx,
    toks: &[Token<'_>],
    i: usize,
    allowed: &[&str],
) -> Result<Vec<(String, f64)>> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for j in i..toks.len() {
        let (w, col) = word(ctx, toks, j, "KEY=VALUE")?;
        let (k, v) = w
            .split_once('=')
            .ok_or_else(|| ctx.err(col, format!("expected KEY=VALUE, got '{w}'")))?;
        let key = k.to_ascii_uppercase();
        if !allowed.contains(&key.as_str()) {
            return Err(ctx.err(
                col,
                format!("unknown key '{k}', expected one of {}", allowed.join(", ")),
            ));
        }
        if out.iter().any(|(existing, _)| *existing == key) {
            return Err(ctx.err(col, format!("key '{k}' given twice")));
        }
        let value = parse_value(v)
            .ok_or_else(|| ctx.err(col + k.len() + 1, format!("invalid number '{v}'")))?;
        out.push((key, value));
    }
    Ok(out)
}

fn lookup(kv: &[(String, f64)], key: &str) -> Option<f64> {
    kv.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
}

fn element(ctx: &LineCtx, toks: &[Token<'_>]) -> Result<Element> {
    let (name, _) = word(ctx, toks, 0, "element name")?;
    let letter = name.chars().next().expect("words are nonempty");
    let kind = ElementKind::from_letter(letter).ok_or_else(|| NetlistError::UnknownKind {
        line: ctx.line,
        letter,
        name: name.to_string(),
    })?;
    let (a, _) = word(ctx, toks, 1, "first node")?;
    let (b, _) = word(ctx, toks, 2, "second node")?;
    let device = match kind {
        ElementKind::Resistor | ElementKind::Inductor | ElementKind::Capacitor => {
            let v = number(ctx, toks, 3, "element value")?;
            no_trailing(ctx, toks, 4)?;
            match kind {
                ElementKind::Resistor => Device::Resistor(v),
                ElementKind::Inductor => Device::Inductor(v),
                _ => Device::Capacitor(v),
            }
        }
        ElementKind::VoltageSource => Device::VoltageSource(waveform(ctx, toks, 3)?),
        ElementKind::CurrentSource => Device::CurrentSource(waveform(ctx, toks, 3)?),
        ElementKind::Diode => {
            let kv = key_values(ctx, toks, 3, &["IS", "N", "VT"])?;
            let d = DiodeModel::default();
            Device::Diode(DiodeModel {
                saturation_current: lookup(&kv, "IS").unwrap_or(d.saturation_current),
                emission: lookup(&kv, "N").unwrap_or(d.emission),
                thermal_voltage: lookup(&kv, "VT").unwrap_or(d.thermal_voltage),
            })
        }
        ElementKind::Switch => {
            let kv = key_values(
                ctx,
                toks,
                3,
                &["RON", "ROFF", "RAMP", "PERIOD", "DUTY", "DELAY"],
            )?;
            let required = |k: &str| {
                lookup(&kv, k).ok_or_else(|| ctx.err(ctx.eol(), format!("switch needs {k}=")))
            };
            Device::Switch(SwitchModel {
                r_on: lookup(&kv, "RON").unwrap_or(0.01),
                r_off: lookup(&kv, "ROFF").unwrap_or(1e6),
                ramp: lookup(&kv, "RAMP").unwrap_or(SwitchModel::DEFAULT_RAMP),
                period: required("PERIOD")?,
                duty: required("DUTY")?,
                delay: lookup(&kv, "DELAY").unwrap_or(0.0),
            })
        }
    };
    Ok(Element::new(name, a, b, device))
}

enum Line {
    Element(Element),
    Title(String),
    Tran(TranDirective),
    Sens(SensDirective),
    Params(Vec<String>),
    End,
}

fn directive(ctx: &LineCtx, text: &str) -> Result<Line> {
    let mut words: Vec<(usize, &str)> = Vec::new();
    let mut offset = 0;
    for w in text.split_whitespace() {
        let pos = text[offset..].find(w).expect("word comes from text") + offset;
        words.push((pos + 1, w));
        offset = pos + w.len();
    }
    let (col, head) = words[0];
    let num = |i: usize, what: &str| -> Result<f64> {
        let (c, w) = *words
            .get(i)
            .ok_or_else(|| ctx.err(ctx.eol(), format!("missing {what}")))?;
        parse_value(w).ok_or_else(|| ctx.err(c, format!("invalid number '{w}' for {what}")))
    };
    let exact = |n: usize| -> Result<()> {
        match words.get(n) {
            Some((c, _)) => Err(ctx.err(*c, "unexpected trailing input")),
            None => Ok(()),
        }
    };
    match head.to_ascii_lowercase().as_str() {
        ".title" => Ok(Line::Title(text[col - 1 + head.len()..].trim().to_string())),
        ".end" => Ok(Line::End),
        ".tran" => {
            let dt = num(1, "timestep")?;
            let t_end = num(2, "end time")?;
            exact(3)?;
            Ok(Line::Tran(TranDirective { dt, t_end }))
        }
        ".sens" => {
            let t_start = num(1, "window start")?;
            let t_end = num(2, "window end")?;
            let (_, qoi) = *words
                .get(3)
                .ok_or_else(|| ctx.err(ctx.eol(), "missing QoI selector"))?;
            exact(4)?;
            Ok(Line::Sens(SensDirective {
                t_start,
                t_end,
                qoi: qoi.to_string(),
            }))
        }
        ".params" => {
            if words.len() < 2 {
                return Err(ctx.err(ctx.eol(), ".params needs at least one element name"));
            }
            Ok(Line::Params(
                words[1..].iter().map(|(_, w)| w.to_string()).collect(),
            ))
        }
        _ => Err(ctx.err(col, format!("unknown directive '{head}'"))),
    }
}

/// Parses netlist text into a validated [`Netlist`].
pub fn parse_netlist(text: &str) -> Result<Netlist> {
    let mut title = String::new();
    let mut elements = Vec::new();
    let mut directives = Directives::default();
    for (idx, raw) in text.lines().enumerate() {
        let content = match raw.find(';') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let ctx = LineCtx {
            line: idx + 1,
            len: content.trim_end().len(),
        };
        let trimmed = content.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('*') {
            continue;
        }
        let parsed = if trimmed.starts_with('.') {
            directive(&ctx, content)?
        } else {
            Line::Element(element(&ctx, &tokenize(content))?)
        };
        match parsed {
            Line::Element(e) => elements.push(e),
            Line::Title(t) => title = t,
            Line::Tran(t) => directives.tran = Some(t),
            Line::Sens(s) => directives.sens = Some(s),
            Line::Params(p) => directives.params.get_or_insert_with(Vec::new).extend(p),
            Line::End => break,
        }
    }
    Netlist::new(title, elements, directives)
}
