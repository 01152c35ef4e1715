use std::fmt::Write as _;

use super::{DropInfo, DropReason, ElementId, FlowKey, HopMetadata, IntReport, TelemetryError, Utilization};
use crate::simnet::VirtualTime;

/// Render one report as a trace line (no trailing newline).
///
/// `INT flow=<sip>:<sport>-<dip>:<dport>/<proto> seq=<n> size=<bytes> hops=[...] drop=<idx>:<reason>|-`
pub fn format_report(r: &IntReport) -> String {
    let mut s = format!("INT flow={} seq={} size={} hops=[", r.flow, r.seq, r.pkt_size_bytes);
    for (i, h) in r.hops.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(
            s,
            "{}:{}:{}:{}:{}:{}:{}:{}",
            h.switch_id.0,
            h.ingress_port,
            h.egress_port,
            h.queue_id,
            h.queue_depth,
            h.hop_latency_ns.as_nanos(),
            h.link_utilization,
            h.timestamp_ns.as_nanos()
        );
    }
    s.push_str("] drop=");
    match r.drop {
        Some(d) => {
            let _ = write!(s, "{}:{}", d.hop_index, d.reason);
        }
        None => s.push('-'),
    }
    s
}

pub fn format_trace<'a>(reports: impl IntoIterator<Item = &'a IntReport>) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format_report(r));
        out.push('\n');
    }
    out
}

fn parse_util(s: &str) -> Result<Utilization, String> {
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if frac.len() > 4 || int.is_empty() || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
        return Err(format!("bad utilization `{s}`"));
    }
    let int: u32 = int.parse().map_err(|_| format!("bad utilization `{s}`"))?;
    let frac_val: u32 = if frac.is_empty() { 0 } else { frac.parse::<u32>().unwrap() * 10u32.pow(4 - frac.len() as u32) };
    let v = int
        .checked_mul(10_000)
        .and_then(|x| x.checked_add(frac_val))
        .filter(|&v| v <= 10_000)
        .ok_or_else(|| format!("utilization `{s}` outside [0, 1]"))?;
    Ok(Utilization::from_ten_thousandths(v as u16).unwrap())
}

fn parse_hop(s: &str) -> Result<HopMetadata, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 8 {
        return Err(format!("hop `{s}` has {} fields, expected 8", parts.len()));
    }
    fn num<T: std::str::FromStr>(what: &str, v: &str) -> Result<T, String> {
        v.parse().map_err(|_| format!("bad {what} `{v}`"))
    }
    Ok(HopMetadata {
        switch_id: ElementId(num("switch id", parts[0])?),
        ingress_port: num("ingress port", parts[1])?,
        egress_port: num("egress port", parts[2])?,
        queue_id: num("queue id", parts[3])?,
        queue_depth: num("queue depth", parts[4])?,
        hop_latency_ns: VirtualTime::from_nanos(num("hop latency", parts[5])?),
        link_utilization: parse_util(parts[6])?,
        timestamp_ns: VirtualTime::from_nanos(num("timestamp", parts[7])?),
    })
}

fn field<'a>(tok: Option<&'a str>, key: &str) -> Result<&'a str, String> {
    let tok = tok.ok_or_else(|| format!("missing `{key}=`"))?;
    tok.strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| format!("expected `{key}=...`, found `{tok}`"))
}

fn parse_line_inner(line: &str) -> Result<IntReport, String> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some("INT") {
        return Err("line must start with `INT`".into());
    }
    let flow: FlowKey = field(toks.next(), "flow")?.parse()?;
    let seq: u64 = field(toks.next(), "seq")?.parse().map_err(|_| "bad seq".to_string())?;
    let size: u32 = field(toks.next(), "size")?.parse().map_err(|_| "bad size".to_string())?;
    let hops_txt = field(toks.next(), "hops")?;
    let inner = hops_txt
        .strip_prefix('[')
        .and_then(|h| h.strip_suffix(']'))
        .ok_or_else(|| "hops must be bracketed".to_string())?;
    let hops = if inner.is_empty() {
        Vec::new()
    } else {
        inner.split(';').map(parse_hop).collect::<Result<Vec<_>, _>>()?
    };
    let drop_txt = field(toks.next(), "drop")?;
    let drop = if drop_txt == "-" {
        None
    } else {
        let (idx, reason) = drop_txt.split_once(':').ok_or_else(|| format!("bad drop `{drop_txt}`"))?;
        let hop_index = idx.parse().map_err(|_| format!("bad drop index `{idx}`"))?;
        let reason: DropReason = reason.parse()?;
        Some(DropInfo { hop_index, reason })
    };
    if let Some(extra) = toks.next() {
        return Err(format!("unexpected trailing token `{extra}`"));
    }
    IntReport::new(flow, seq, hops, size, drop).map_err(|e| e.to_string())
}

/// Parse a single trace line; `line_no` is reported in errors (1-based).
pub fn parse_report_line(line: &str, line_no: usize) -> Result<IntReport, TelemetryError> {
    parse_line_inner(line.trim()).map_err(|msg| TelemetryError::Parse { line: line_no, msg })
}

/// Parse a whole trace. Blank lines and `#` comments are skipped.
pub fn parse_trace(text: &str) -> Result<Vec<IntReport>, TelemetryError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| parse_report_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::tests::{flow, hop};
    use proptest::prelude::*;

    #[test]
    fn known_line() {
        let r = IntReport::new(
            flow(1),
            7,
            vec![hop(1, 200, 100), hop(2, 500, 400)],
            1500,
            Some(DropInfo { hop_index: 1, reason: DropReason::QueueOverflow }),
        )
        .unwrap();
        let line = format_report(&r);
        assert_eq!(
            line,
            "INT flow=10.0.0.1:1001-10.1.0.1:80/6 seq=7 size=1500 \
             hops=[1:1:2:0:3:200:0.5000:100;2:1:2:0:3:500:0.5000:400] drop=1:QueueOverflow"
        );
        assert_eq!(parse_report_line(&line, 1).unwrap(), r);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "# header\nINT flow=10.0.0.1:1-10.0.0.2:2/6 seq=1 size=64 hops=[1:0:0:0:0:5:0.1:0] drop=-\n\nINT flow=bad\n";
        match parse_trace(text) {
            Err(TelemetryError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_hops_and_bad_util() {
        let empty = "INT flow=10.0.0.1:1-10.0.0.2:2/6 seq=1 size=64 hops=[] drop=-";
        assert!(parse_report_line(empty, 1).is_err());
        let util = "INT flow=10.0.0.1:1-10.0.0.2:2/6 seq=1 size=64 hops=[1:0:0:0:0:5:1.0001:0] drop=-";
        assert!(parse_report_line(util, 1).is_err());
        let five_dec = "INT flow=10.0.0.1:1-10.0.0.2:2/6 seq=1 size=64 hops=[1:0:0:0:0:5:0.12345:0] drop=-";
        assert!(parse_report_line(five_dec, 1).is_err());
    }

    fn arb_hop() -> impl Strategy<Value = HopMetadata> {
        (any::<u32>(), any::<u16>(), any::<u16>(), any::<u32>(), any::<u32>(), 0u64..1_000_000, 0u16..=10_000, 0u64..1_000_000)
            .prop_map(|(sw, i, e, q, d, lat, u, ts)| HopMetadata {
                switch_id: ElementId(sw),
                ingress_port: i,
                egress_port: e,
                queue_id: q,
                queue_depth: d,
                hop_latency_ns: VirtualTime::from_nanos(lat),
                link_utilization: Utilization::from_ten_thousandths(u).unwrap(),
                timestamp_ns: VirtualTime::from_nanos(ts),
            })
    }

    pub(crate) fn arb_report() -> impl Strategy<Value = IntReport> {
        (
            any::<(u32, u32, u16, u16, u8)>(),
            any::<u64>(),
            1u32..9000,
            prop::collection::vec(arb_hop(), 1..8),
            prop::option::of((any::<prop::sample::Index>(), 0usize..4)),
        )
            .prop_map(|((si, di, sp, dp, p), seq, size, mut hops, drop)| {
                hops.sort_by_key(|h| h.timestamp_ns);
                let drop = drop.map(|(idx, r)| DropInfo { hop_index: idx.index(hops.len()), reason: DropReason::ALL[r] });
                let flow = FlowKey { src_ip: si, dst_ip: di, src_port: sp, dst_port: dp, proto: p };
                IntReport::new(flow, seq, hops, size, drop).unwrap()
            })
    }

    proptest! {
        #[test]
        fn trace_round_trip(r in arb_report()) {
            let line = format_report(&r);
            let back = parse_report_line(&line, 1).unwrap();
            prop_assert_eq!(crate::telemetry::path_latency(&back), crate::telemetry::path_latency(&r));
            prop_assert_eq!(back, r);
        }

        #[test]
        fn packet_round_trip(r in arb_report()) {
            let p = crate::telemetry::IntPacket::from_report(&r);
            let (_, back) = crate::telemetry::sink_extract(&p).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
