"""Smoke test for the `aam` extension module.

Build and install it first:

    pip install --no-build-isolation -e crates/py
    python python/smoke.py
"""

import json
import math
import pathlib
import tempfile

import aam

ROOT = pathlib.Path(__file__).resolve().parent.parent
FIXTURE = ROOT / "crates/core/tests/fixtures/corridor_capped.json"


def split_fixture(tmp):
    fx = json.loads(FIXTURE.read_text())
    paths = {}
    for key in ("model", "area", "pattern"):
        paths[key] = str(tmp / f"{key}.json")
        pathlib.Path(paths[key]).write_text(json.dumps(fx[key]))
    return paths, fx["oracle"]


def main():
    with tempfile.TemporaryDirectory() as d:
        tmp = pathlib.Path(d)
        p, oracle = split_fixture(tmp)

        w = aam.weights(p["model"], p["area"])
        area = json.loads(pathlib.Path(p["area"]).read_text())
        sending = set(area["sending"])
        s = sum(x for b, x in zip(w["buses"], w["weights"]) if b in sending)
        r = sum(x for b, x in zip(w["buses"], w["weights"]) if b not in sending)
        assert abs(s - 1) < 1e-9 and abs(r + 1) < 1e-9, (s, r)

        pattern = json.loads(pathlib.Path(p["pattern"]).read_text())
        angles = aam.solve_dc(p["model"], pattern["direction"])
        theta = aam.area_angle(w["weights"], [angles[b] for b in w["buses"]])
        assert theta > 0

        st = aam.study(p["model"], p["area"], p["pattern"], tau=oracle["tau"])
        assert st["warning"] <= st["emergency"]

        fast = aam.update_thresholds(p["model"], p["area"], p["pattern"], oracle["change"])
        orig = aam.update_thresholds(
            p["model"], p["area"], p["pattern"], oracle["change"], method="original", tau=oracle["tau"]
        )
        assert fast["max_transfer_evaluations"] == 1
        assert math.isclose(fast["emergency"], oracle["fast"]["emergency"], rel_tol=1e-9)
        assert math.isclose(orig["warning"], oracle["original"]["warning"], rel_tol=1e-9)

        plan = aam.mitigate(p["model"], p["area"], p["pattern"], 50.0)
        assert abs(sum(b["shed"] for b in plan["plan"]["per_bus"]) - 50.0) < 1e-6

        # steady scenario at half the emergency angle, monitored offline
        scale = 0.5 * st["emergency"] / theta
        scenario = {
            "model": "model.json",
            "area": "area.json",
            "injections": {b: scale * v for b, v in pattern["direction"].items()},
            "duration": 2.0,
            "frame_rate": 10.0,
        }
        (tmp / "scenario.json").write_text(json.dumps(scenario))
        n = aam.synthesize(str(tmp / "scenario.json"), str(tmp / "replay.csv"))
        assert n == 21
        config = {
            "boundary": w["buses"],
            "weights": {"weights": w["weights"], "b_mod": w["b_mod"]},
            "thresholds": aam.compensate_thresholds(st["warning"], st["emergency"], 0.0, 0.0),
            "frame_rate": 10.0,
        }
        channel_map = {"angles": [{"stream": 1, "channel": i, "bus": b} for i, b in enumerate(w["buses"])]}
        (tmp / "monitor.json").write_text(json.dumps(config))
        (tmp / "map.json").write_text(json.dumps(channel_map))
        log = aam.monitor_file(str(tmp / "monitor.json"), str(tmp / "map.json"), str(tmp / "replay.csv"))
        rows = log.splitlines()
        assert rows[0] == "timestamp_us,area_angle_deg,status"
        assert len(rows) == 1 + n and all(r.endswith(",NORMAL") for r in rows[1:])
        assert abs(float(rows[1].split(",")[1]) - 0.5 * st["emergency"]) < 1e-5

    t = aam.compensate_thresholds(21.49, 24.07, 0.7, 0.0)
    assert abs(t["warning_ope"] - 20.79) < 1e-12 and abs(t["emergency_ope"] - 23.37) < 1e-12
    assert aam.warning_index([10, 10, 10, 9.5, 7, 5], 0.5) == 5
    assert abs(aam.lse_angle((1.0, 0.0), (1.0, 0.0), (0.0, 0.1)) - math.degrees(math.atan2(-0.1, 1))) < 1e-6

    frame = aam.encode_frame(3, 1_700_000_000_000_000, [(12.5, 0), (-3.25, 3)])
    assert frame[:4] == b"AAMF"
    assert aam.decode_frame(frame) == (3, 1_700_000_000_000_000, [(12.5, 0), (-3.25, 3)])
    bad = bytearray(frame)
    bad[-1] ^= 0xFF
    try:
        aam.decode_frame(bytes(bad))
    except ValueError as e:
        assert "crc" in str(e)
    else:
        raise AssertionError("corrupt frame accepted")

    print("aam smoke test passed")


if __name__ == "__main__":
    main()
