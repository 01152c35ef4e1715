use std::net::Ipv4Addr;

use super::{Action, ClassifierError, FieldMatcher, MonitorId, ReportFields, Rule, RuleSet, Schema, FIELD_COUNT};
use crate::telemetry::DropReason;

struct ParsedLine {
    matchers: Vec<FieldMatcher>,
    priority: Option<i64>,
    rule_id: Option<u32>,
    action: Action,
}

fn parse_prefix(tok: &str) -> Result<FieldMatcher, String> {
    let (addr, len) = tok.split_once('/').ok_or_else(|| format!("expected <addr>/<len>, found `{tok}`"))?;
    let addr: Ipv4Addr = addr.parse().map_err(|_| format!("bad address `{addr}`"))?;
    let len: u8 = len.parse().map_err(|_| format!("bad prefix length `{len}`"))?;
    if len > 32 {
        return Err(format!("prefix length {len} exceeds 32"));
    }
    Ok(match len {
        0 => FieldMatcher::Wildcard,
        _ => FieldMatcher::Prefix { value: u32::from(addr), len },
    })
}

fn parse_range(tok: &str) -> Result<FieldMatcher, String> {
    let (lo, hi) = tok.split_once(':').ok_or_else(|| format!("expected <lo>:<hi>, found `{tok}`"))?;
    let lo: u32 = lo.parse().map_err(|_| format!("bad range bound `{lo}`"))?;
    let hi: u32 = hi.parse().map_err(|_| format!("bad range bound `{hi}`"))?;
    if lo > hi {
        return Err(format!("range {lo}:{hi} has lo > hi"));
    }
    Ok(FieldMatcher::Range { lo, hi })
}

fn parse_hex(s: &str) -> Result<u32, String> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u32::from_str_radix(digits, 16).map_err(|_| format!("bad hex value `{s}`"))
}

fn parse_proto(tok: &str) -> Result<FieldMatcher, String> {
    let (val, mask) = tok.split_once('/').ok_or_else(|| format!("expected <proto>/<mask>, found `{tok}`"))?;
    let (val, mask) = (parse_hex(val)?, parse_hex(mask)?);
    match mask {
        0 => Ok(FieldMatcher::Wildcard),
        0xff => Ok(FieldMatcher::Exact(val)),
        _ => Err(format!("unsupported protocol mask {mask:#x} (only 0x00 and 0xFF)")),
    }
}

fn parse_ext(tok: &str, drop_field: bool) -> Result<FieldMatcher, String> {
    if tok == "*" {
        return Ok(FieldMatcher::Wildcard);
    }
    if tok.contains(':') {
        return parse_range(tok);
    }
    if let Ok(v) = tok.parse::<u32>() {
        return Ok(FieldMatcher::Exact(v));
    }
    if drop_field {
        let r: DropReason = tok.parse()?;
        return Ok(FieldMatcher::Exact(r.code()));
    }
    Err(format!("bad field value `{tok}`"))
}

fn parse_action(text: &str) -> Result<Action, String> {
    let text = text.trim();
    let (dests, proj) = match text.find('{') {
        Some(i) => {
            let inner = text[i..]
                .strip_prefix('{')
                .and_then(|p| p.strip_suffix('}'))
                .ok_or_else(|| "projection list must be enclosed in { }".to_string())?;
            (&text[..i], Some(inner))
        }
        None => (text, None),
    };
    let destinations: Vec<MonitorId> =
        dests.split(',').map(str::trim).filter(|d| !d.is_empty()).map(MonitorId::new).collect();
    if destinations.is_empty() {
        return Err("action has no monitor destinations".into());
    }
    let projection = match proj {
        None => ReportFields::all(),
        Some(p) => ReportFields::from_names(p.split(',').map(str::trim).filter(|s| !s.is_empty()))
            .map_err(|e| e.to_string())?,
    };
    Ok(Action { destinations, projection })
}

fn parse_line(body: &str) -> Result<ParsedLine, String> {
    let (fields_txt, action) = match body.split_once("->") {
        Some((f, a)) => (f, parse_action(a)?),
        None => (body, Action::default()),
    };
    // ClassBench writes port ranges as `lo : hi`
    let normalized = fields_txt.replace(" : ", ":").replace("\t:\t", ":");
    let mut toks: Vec<&str> = normalized.split_whitespace().collect();

    let mut priority = None;
    let mut rule_id = None;
    toks.retain(|t| {
        if let Some(p) = t.strip_prefix("prio=") {
            priority = Some(p.to_string());
            false
        } else if let Some(i) = t.strip_prefix("id=") {
            rule_id = Some(i.to_string());
            false
        } else {
            true
        }
    });
    let priority = priority.map(|p| p.parse::<i64>().map_err(|_| format!("bad priority `{p}`"))).transpose()?;
    let rule_id = rule_id.map(|i| i.parse::<u32>().map_err(|_| format!("bad rule id `{i}`"))).transpose()?;

    // ClassBench trace-derived files may carry a trailing flags field after the protocol
    if toks.len() == 6 || toks.len() == 10 {
        if toks[5].starts_with("0x") && toks[5].contains('/') {
            toks.remove(5);
        }
    }
    if toks.len() != 5 && toks.len() != FIELD_COUNT {
        return Err(format!("expected 5 or {FIELD_COUNT} fields, found {}", toks.len()));
    }

    let mut matchers = vec![
        parse_prefix(toks[0])?,
        parse_prefix(toks[1])?,
        parse_range(toks[2])?,
        parse_range(toks[3])?,
        parse_proto(toks[4])?,
    ];
    if toks.len() == FIELD_COUNT {
        for (i, t) in toks[5..].iter().enumerate() {
            matchers.push(parse_ext(t, i == 3)?);
        }
    } else {
        matchers.extend([FieldMatcher::Wildcard; 4]);
    }
    // full-range port fields are wildcards
    for m in &mut matchers[2..4] {
        if *m == (FieldMatcher::Range { lo: 0, hi: 65535 }) {
            *m = FieldMatcher::Wildcard;
        }
    }
    Ok(ParsedLine { matchers, priority, rule_id, action })
}

/// Parse a ClassBench-style rule file.
///
/// Rules keep file order. Without an explicit `prio=`, earlier lines get higher
/// priority (`N - index`); without `id=`, a rule's id is its index.
pub fn parse_ruleset(text: &str, schema: &Schema) -> Result<RuleSet, ClassifierError> {
    let mut parsed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let body = t.strip_prefix('@').ok_or_else(|| ClassifierError::Parse {
            line: i + 1,
            msg: "rule lines start with `@`".into(),
        })?;
        let p = parse_line(body).map_err(|msg| ClassifierError::Parse { line: i + 1, msg })?;
        parsed.push((i + 1, p));
    }
    let n = parsed.len() as i64;
    let mut rules = Vec::with_capacity(parsed.len());
    for (idx, (line, p)) in parsed.into_iter().enumerate() {
        let rule = Rule {
            rule_id: p.rule_id.unwrap_or(idx as u32),
            priority: p.priority.unwrap_or(n - idx as i64),
            matchers: p.matchers,
            action: p.action,
        };
        rule.validate(schema).map_err(|e| ClassifierError::Parse { line, msg: e.to_string() })?;
        rules.push(rule);
    }
    RuleSet::new(schema.clone(), rules)
}

fn fmt_prefix(m: &FieldMatcher) -> String {
    match *m {
        FieldMatcher::Wildcard => "0.0.0.0/0".into(),
        FieldMatcher::Prefix { value, len } => format!("{}/{}", Ipv4Addr::from(value), len),
        FieldMatcher::Exact(v) => format!("{}/32", Ipv4Addr::from(v)),
        FieldMatcher::Range { .. } => unreachable!("address fields are prefixes"),
    }
}

fn fmt_range(m: &FieldMatcher) -> String {
    match *m {
        FieldMatcher::Wildcard => "0:65535".into(),
        FieldMatcher::Exact(v) => format!("{v}:{v}"),
        FieldMatcher::Range { lo, hi } => format!("{lo}:{hi}"),
        FieldMatcher::Prefix { .. } => {
            let (lo, hi) = m.bounds(16);
            format!("{lo}:{hi}")
        }
    }
}

fn fmt_ext(m: &FieldMatcher) -> String {
    match *m {
        FieldMatcher::Wildcard => "*".into(),
        FieldMatcher::Exact(v) => v.to_string(),
        FieldMatcher::Range { lo, hi } => format!("{lo}:{hi}"),
        FieldMatcher::Prefix { .. } => {
            let (lo, hi) = m.bounds(32);
            format!("{lo}:{hi}")
        }
    }
}

/// Render a rule in the file format, with explicit `prio=` and `id=`.
pub fn format_rule(r: &Rule) -> String {
    let proto = match r.matchers[4] {
        FieldMatcher::Exact(v) => format!("0x{v:02X}/0xFF"),
        _ => "0x00/0x00".into(),
    };
    let mut s = format!(
        "@{} {} {} {} {}",
        fmt_prefix(&r.matchers[0]),
        fmt_prefix(&r.matchers[1]),
        fmt_range(&r.matchers[2]),
        fmt_range(&r.matchers[3]),
        proto
    );
    if r.matchers[5..].iter().any(|m| *m != FieldMatcher::Wildcard) {
        for m in &r.matchers[5..] {
            s.push(' ');
            s.push_str(&fmt_ext(m));
        }
    }
    s.push_str(&format!(" prio={} id={}", r.priority, r.rule_id));
    if r.action != Action::default() {
        let dests: Vec<&str> = r.action.destinations.iter().map(MonitorId::as_str).collect();
        s.push_str(&format!(" -> {} {{{}}}", dests.join(","), r.action.projection.names().join(",")));
    }
    s
}
