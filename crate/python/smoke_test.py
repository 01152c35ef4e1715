"""Smoke test for the `reflex` extension module.

Build it first:  maturin develop -m crates/py/Cargo.toml
"""

import reflex


def main():
    assert reflex.report_rate_for_link(100_000_000_000, 1500) == 8_333_333
    assert reflex.monitor_budget(8_333_333, 3_200_000_000) == (384, 120)

    assert reflex.raft_write_latency(switch_latency_ns=1, zero_service=True) == 348
    assert reflex.raft_write_latency(switch_latency_ns=300, zero_service=True) == 1544
    assert reflex.raft_write_latency() == 1880

    rules = reflex.RuleSet.synthetic(200, "fw", seed=3)
    assert len(rules) == 200
    keys = rules.sample_keys(2000, seed=4)
    assert rules.mismatches(keys) == 0
    assert all(rules.classify(k) == rules.classify_linear(k) for k in keys[:100])
    try:
        rules.classify([1, 2, 3])
    except ValueError:
        pass
    else:
        raise AssertionError("short key accepted")

    plane = reflex.Plane("nanopu")
    plane.quiesce()
    run = plane.inject_planted(flows=4, reports_per_flow=20, spikes=[(2, 12, 1, 5000)])
    assert run["commands"] == 1, run
    t = run["traces"][0]
    assert t["kind"] == "reroute" and t["target"] == 1
    assert 0 < t["e2e_ns"] < 10_000
    assert plane.forwarding(1), "reroute not applied"

    direct = reflex.Plane("nanopu", direct_reflex=True, monitor_service_ns=78)
    run = direct.inject_planted(spikes=[(2, 12, 1, 5000)])
    assert run["stages"]["direct"]["max_ns"] == 130

    try:
        reflex.Plane("warp")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")

    print("smoke test ok")


if __name__ == "__main__":
    main()
