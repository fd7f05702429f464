"""Smoke test for the servo_sim extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/servo_sim-*.whl
"""

import math
import tempfile

import servo_sim


def nearest_rank(values, p):
    s = sorted(values)
    k = max(1, math.ceil(p / 100 * len(s)))
    return s[k - 1]


def check_construct():
    c = servo_sim.Construct("Clock252")
    assert c.active_blocks == 252, c.active_blocks
    loop = c.detect_loop(1000)
    assert loop["looped"] and loop["period"] == 16, loop
    hashes = c.simulate(2 * loop["period"] + loop["prefix"])
    assert hashes[loop["prefix"]] == hashes[loop["prefix"] + loop["period"]]
    before = c.state_hash()
    c.step(loop["period"] * 3)
    c.step(loop["prefix"])
    assert len(c.encode()) > 0
    return before


def check_terrain():
    a = servo_sim.generate_chunk(7, 3, -2)
    assert a == servo_sim.generate_chunk(7, 3, -2)
    assert servo_sim.solid_blocks(a) > 0
    flat = servo_sim.generate_chunk(7, 3, -2, mode="flat")
    assert servo_sim.solid_blocks(flat) == 16 * 16 * servo_sim.column_height(7, 0, 0, mode="flat")


def check_statistics():
    values = [float((i * 37) % 101) for i in range(1, 400)]
    for p in (1, 50, 95, 99.9):
        assert servo_sim.percentile(values, p) == nearest_rank(values, p)
    assert servo_sim.percentile([], 50) is None
    groups = {1: [10.0] * 100, 2: [40.0] * 96 + [60.0] * 4, 3: [40.0] * 90 + [60.0] * 10}
    assert servo_sim.max_supported_players(groups, 50.0) == 2


SCENARIO = """
name = "smoke"
duration_s = 60
warmup_s = 0
seed = 3
[players]
count = 2
interval_s = 1
[behavior]
kind = "random_actions"
[sc]
count = 2
template = "Clock252"
[server]
view_distance = 32
sc_mode = "offloaded"
"""


def check_scenario():
    with tempfile.TemporaryDirectory() as out:
        summary = servo_sim.run_scenario(SCENARIO, out_dir=out)
        assert summary["ticks"] == 1200, summary
        assert summary["players"] == 2, summary
        assert summary["invocations"] > 2, summary
        assert 0.0 <= summary["median_efficiency"] <= 1.0, summary
        text = servo_sim.report(out)
        assert "smoke" in text, text
    return summary


def main():
    check_construct()
    check_terrain()
    check_statistics()
    summary = check_scenario()
    print("servo_sim smoke test passed:", summary)


if __name__ == "__main__":
    main()
