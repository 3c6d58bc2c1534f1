import json
import math

import numpy as np
import pytest

from uvtdoa import ConfigError, config_hash, parse_config, serialize_config
from uvtdoa.cli import (
    cluster_stats,
    main,
    parse_replay_log,
    sessions_from_records,
)

CONFIG_TEXT = """
[scene]
tx_a_m = 0, 0
tx_b_m = 75.6, 0
tx_c_m = 32.2, 76.6
rx_true_m = 36, 25

[grid]
x_min_m = 25
x_max_m = 50
y_min_m = 20
y_max_m = 45
steps_x = 3
steps_y = 3

[budget]
power_w = 0.15
rx_area_m2 = 1.77e-4
divergence_full_angle_deg = 120
wavelength_m = 266e-9

[signal]
sequence_length = 64
symbol_rate_hz = 1e6
chips_per_symbol = 20
slot_interval_s = 100e-6

[clock]
distribution = uniform
lo_ns = 0
hi_ns = 100

[campaign]
trials_per_point = 4
seed = 7
"""


class TestConfigParsing:
    def test_valid_config_si_units(self):
        cfg = parse_config(CONFIG_TEXT)
        assert cfg.scene.tx_b == (75.6, 0.0)
        assert cfg.budget.power_w == 0.15
        assert cfg.budget.divergence_full_angle_rad == pytest.approx(math.radians(120))
        assert cfg.clock.hi_s == pytest.approx(100e-9)
        assert cfg.signal.length == 64
        assert cfg.trials_per_point == 4
        assert cfg.grid.n_points == 9

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config(CONFIG_TEXT.replace("[scene]", "[scene]\nbare_power = 1"))

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match=r"unknown section \[extras\]"):
            parse_config(CONFIG_TEXT + "\n[extras]\nfoo = 1\n")

    def test_missing_required_key(self):
        broken = CONFIG_TEXT.replace("power_w = 0.15\n", "")
        with pytest.raises(ConfigError, match=r"power_w.*\[budget\]|\[budget\].*power_w"):
            parse_config(broken)

    def test_bad_value_diagnostics(self):
        broken = CONFIG_TEXT.replace("power_w = 0.15", "power_w = lots")
        with pytest.raises(ConfigError, match=r"\[budget\] power_w"):
            parse_config(broken)

    def test_bare_number_for_pair_rejected(self):
        broken = CONFIG_TEXT.replace("tx_a_m = 0, 0", "tx_a_m = 0")
        with pytest.raises(ConfigError, match=r"\[scene\] tx_a_m"):
            parse_config(broken)

    def test_round_trip_semantically_identical(self):
        cfg = parse_config(CONFIG_TEXT)
        again = parse_config(serialize_config(cfg))
        assert again == cfg
        assert config_hash(again) == config_hash(cfg)

    def test_default_grid_when_section_omitted(self):
        text = CONFIG_TEXT.replace(
            "[grid]\nx_min_m = 25\nx_max_m = 50\ny_min_m = 20\ny_max_m = 45\nsteps_x = 3\nsteps_y = 3\n",
            "",
        )
        cfg = parse_config(text)
        assert cfg.grid.steps_x == 9
        assert cfg.grid.x_min == pytest.approx(0.2 * 75.6)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(CONFIG_TEXT)
    return path


def read_meta(path):
    meta = {}
    for line in path.read_text().splitlines():
        if not line.startswith("# "):
            break
        key, _, value = line[2:].partition(" = ")
        meta[key] = value
    return meta


class TestCliTheory:
    def test_writes_csv_with_headers(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["theory", "--config", str(config_file), "--out", str(out)]) == 0
        csv_path = out / "theory_map.csv"
        meta = read_meta(csv_path)
        assert meta["tool"] == "uvtdoa theory"
        assert len(meta["config_sha256"]) == 64
        assert meta["seed"] == "7"
        body = [l for l in csv_path.read_text().splitlines() if not l.startswith("#")]
        assert body[0].startswith("x_m,y_m,e_p_m,condition_number")
        assert len(body) == 1 + 9
        captured = capsys.readouterr()
        assert "grid_average_ep_m" in captured.out

    def test_json_format(self, config_file, tmp_path):
        out = tmp_path / "outj"
        assert main(["theory", "--config", str(config_file), "--out", str(out),
                     "--format", "json"]) == 0
        payload = json.loads((out / "theory_map.json").read_text())
        assert len(payload["points"]) == 9
        assert payload["grid_average_ep_m"] > 0

    def test_bad_config_exit_code(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[scene]\ntx_a_m = 0, 0\n")
        assert main(["theory", "--config", str(bad), "--out", str(tmp_path)]) == 2

    def test_csv_matches_direct_library_call(self, config_file, tmp_path):
        from uvtdoa import load_config, theory_grid
        out = tmp_path / "golden"
        main(["theory", "--config", str(config_file), "--out", str(out)])
        cfg = load_config(config_file)
        tmap = theory_grid(cfg.scene, cfg.grid, cfg.budget, cfg.signal, cfg.clock)
        rows = [l for l in (out / "theory_map.csv").read_text().splitlines()
                if not l.startswith("#") and not l.startswith("x_m")]
        assert len(rows) == len(tmap.points)
        for line, point in zip(rows, tmap.points):
            x, y, e_p, cond = (float(v) for v in line.split(",")[:4])
            assert (x, y) == (point.x, point.y)
            assert e_p == point.e_p
            assert cond == point.condition_number


class TestCliSimulate:
    def test_outputs_and_reproducibility(self, config_file, tmp_path):
        out1 = tmp_path / "r1"
        out2 = tmp_path / "r2"
        assert main(["simulate", "--config", str(config_file), "--out", str(out1)]) == 0
        assert main(["simulate", "--config", str(config_file), "--out", str(out2)]) == 0
        for name in ("campaign.json", "trials.csv", "detections.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
        payload = json.loads((out1 / "campaign.json").read_text())
        assert payload["seed"] == 7
        assert payload["trials_per_point"] == 4
        assert len(payload["points"]) == 9
        assert payload["grid_average_rmse_m"] > 0

    def test_worker_count_does_not_change_bytes(self, config_file, tmp_path):
        out1 = tmp_path / "w1"
        out2 = tmp_path / "w2"
        assert main(["simulate", "--config", str(config_file), "--out", str(out1),
                     "--workers", "1"]) == 0
        assert main(["simulate", "--config", str(config_file), "--out", str(out2),
                     "--workers", "2"]) == 0
        for name in ("campaign.json", "trials.csv", "detections.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_seed_override_changes_results(self, config_file, tmp_path):
        out1 = tmp_path / "s1"
        out2 = tmp_path / "s2"
        main(["simulate", "--config", str(config_file), "--out", str(out1)])
        main(["simulate", "--config", str(config_file), "--out", str(out2), "--seed", "99"])
        p1 = json.loads((out1 / "campaign.json").read_text())
        p2 = json.loads((out2 / "campaign.json").read_text())
        assert p1["seed"] == 7 and p2["seed"] == 99
        assert p1["grid_average_rmse_m"] != p2["grid_average_rmse_m"]

    def test_single_trial_smoke_run_is_fast(self, tmp_path):
        import time
        text = CONFIG_TEXT.replace("trials_per_point = 4", "trials_per_point = 1")
        cfg = tmp_path / "smoke.cfg"
        cfg.write_text(text)
        out = tmp_path / "smoke"
        t0 = time.perf_counter()
        assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
        assert time.perf_counter() - t0 < 10.0

    def test_replay_of_detections_reproduces_trials(self, config_file, tmp_path):
        out = tmp_path / "sim"
        main(["simulate", "--config", str(config_file), "--out", str(out)])
        replay_out = tmp_path / "replay"
        assert main(["replay", "--config", str(config_file), "--log",
                     str(out / "detections.csv"), "--out", str(replay_out)]) == 0
        # match each replayed session estimate to the original trial estimate
        trials = {}
        for line in (out / "trials.csv").read_text().splitlines():
            if line.startswith("#") or line.startswith("point_index"):
                continue
            parts = line.split(",")
            key = f"p{int(parts[0]):03d}t{int(parts[1]):05d}"
            trials[key] = (float(parts[4]), float(parts[5]))
        replayed = 0
        for line in (replay_out / "replay_fixes.csv").read_text().splitlines():
            if line.startswith("#") or line.startswith("session"):
                continue
            parts = line.split(",")
            est = (float(parts[3]), float(parts[4]))
            assert est == trials[parts[0]]
            replayed += 1
        assert replayed == len(trials) == 36


class TestCliSweep:
    def test_sweep_matches_simulate_average(self, config_file, tmp_path):
        out = tmp_path / "sweep"
        assert main(["sweep", "--config", str(config_file), "--out", str(out),
                     "--powers-mw", "150"]) == 0
        sim_out = tmp_path / "sim"
        main(["simulate", "--config", str(config_file), "--out", str(sim_out)])
        payload = json.loads((sim_out / "campaign.json").read_text())
        rows = [l for l in (out / "sweep.csv").read_text().splitlines()
                if not l.startswith("#") and not l.startswith("power_mw")]
        assert len(rows) == 1
        power, sim_avg, theory_avg = rows[0].split(",")[:3]
        assert float(power) == 150.0
        assert float(sim_avg) == payload["grid_average_rmse_m"]
        assert float(theory_avg) == payload["theory_average_m"]


def write_log(path, rows, header=True):
    lines = []
    if header:
        lines.append("timestamp_s,session,anchor,arrival_chip,chip_ns,truth_x_m,truth_y_m")
    lines.extend(rows)
    path.write_text("\n".join(lines) + "\n")


def synthetic_log_rows(scene, points, chip_ns=50.0, sessions_per_point=1, offset_chips=(0, 0)):
    """Detection rows whose chip differences encode the exact geometry."""
    rows = []
    chip_s = chip_ns / 1e9
    sid = 0
    for (x, y) in points:
        d = np.linalg.norm(scene.anchors - np.array([x, y]), axis=1)
        base = 1000
        chips = {
            "A": base,
            "B": base + (d[1] - d[0]) / scene.c / chip_s + offset_chips[0],
            "C": base + (d[2] - d[0]) / scene.c / chip_s + offset_chips[0] + offset_chips[1],
        }
        for _ in range(sessions_per_point):
            for anchor in "ABC":
                rows.append(
                    f"{sid}.0,s{sid:04d},{anchor},{int(round(chips[anchor]))},{chip_ns!r},{x!r},{y!r}"
                )
            sid += 1
    return rows


class TestCliReplay:
    def test_zero_error_log_recovers_positions(self, config_file, tmp_path):
        from conftest import make_scene
        scene = make_scene()
        # chip-aligned truth: pick points whose range differences are close
        # to integer chips, then assert sub-chip recovery
        log = tmp_path / "log.csv"
        write_log(log, synthetic_log_rows(scene, [(36.0, 25.0), (30.0, 40.0)]))
        out = tmp_path / "rep"
        assert main(["replay", "--config", str(config_file), "--log", str(log),
                     "--out", str(out)]) == 0
        for line in (out / "replay_fixes.csv").read_text().splitlines():
            if line.startswith("#") or line.startswith("session"):
                continue
            parts = line.split(",")
            err = float(parts[5])
            assert err < scene.c * 50e-9  # within one chip of flight distance

    def test_malformed_lines_skipped_and_counted(self, config_file, tmp_path):
        from conftest import make_scene
        scene = make_scene()
        rows = synthetic_log_rows(scene, [(36.0, 25.0)])
        rows.insert(1, "not,a,valid,row")
        rows.insert(2, "0.5,s9999,Q,12,50.0,1,1")
        log = tmp_path / "log.csv"
        write_log(log, rows)
        out = tmp_path / "rep"
        assert main(["replay", "--config", str(config_file), "--log", str(log),
                     "--out", str(out)]) == 0
        meta = read_meta(out / "replay_fixes.csv")
        assert meta["skipped_lines"] == "2"

    def test_empty_log_is_io_error(self, config_file, tmp_path):
        log = tmp_path / "empty.csv"
        write_log(log, [])
        assert main(["replay", "--config", str(config_file), "--log", str(log),
                     "--out", str(tmp_path)]) == 4

    def test_two_cluster_report(self, config_file, tmp_path):
        from conftest import make_scene
        scene = make_scene()
        # same truth, two well-separated measurement clusters
        rows = synthetic_log_rows(scene, [(36.0, 25.0)] * 5)
        rows += synthetic_log_rows(scene, [(36.0, 25.0)] * 5, offset_chips=(6, 6))
        # renumber sessions so they are unique
        fixed = []
        for i, row in enumerate(rows):
            parts = row.split(",")
            parts[0] = f"{i // 3}.0"
            parts[1] = f"s{i // 3:04d}"
            fixed.append(",".join(parts))
        log = tmp_path / "log.csv"
        write_log(log, fixed)
        out = tmp_path / "rep"
        assert main(["replay", "--config", str(config_file), "--log", str(log),
                     "--out", str(out)]) == 0
        lines = [l for l in (out / "replay_clusters.csv").read_text().splitlines()
                 if not l.startswith("#") and not l.startswith("truth_x_m")]
        assert len(lines) == 1
        assert lines[0].split(",")[-1] == "2"

    def test_nonmonotone_timestamp_skipped(self, tmp_path):
        rows = [
            "1.0,s0,A,100,50.0,1,1",
            "0.5,s0,B,100,50.0,1,1",  # timestamp went backwards
        ]
        log = tmp_path / "log.csv"
        write_log(log, rows)
        records, skipped = parse_replay_log(log)
        assert skipped == 1
        assert len(records) == 1


class TestClusterStats:
    def test_single_cluster(self):
        rng = np.random.default_rng(0)
        pts = rng.normal((10, 20), 0.5, size=(30, 2))
        stats = cluster_stats(pts, truth=(10, 20))
        assert stats["n_clusters"] == 1
        assert stats["mean_to_truth_m"] < 0.5

    def test_two_clusters(self):
        rng = np.random.default_rng(1)
        pts = np.vstack([
            rng.normal((0, 0), 0.3, size=(15, 2)),
            rng.normal((30, 30), 0.3, size=(15, 2)),
        ])
        assert cluster_stats(pts)["n_clusters"] == 2


class TestCliDiffcal:
    def test_perfect_calibration_and_missing_pair(self, config_file, tmp_path):
        from conftest import make_scene
        scene = make_scene()
        truth = (36.0, 25.0)
        # measurement sessions share a constant 4-chip A-B bias and 2-chip B-C bias
        meas_rows = synthetic_log_rows(scene, [truth] * 6, offset_chips=(4, 2))
        cal_rows = synthetic_log_rows(scene, [truth], offset_chips=(4, 2))
        cal_rows = [r.replace("s0000", "cal0") for r in cal_rows]
        meas = tmp_path / "meas.csv"
        cal = tmp_path / "cal.csv"
        write_log(meas, meas_rows)
        write_log(cal, cal_rows)
        out = tmp_path / "dc"
        assert main(["diffcal", "--config", str(config_file), "--calibration",
                     str(cal), "--log", str(meas), "--out", str(out)]) == 0
        lines = [l for l in (out / "diffcal_fixes.csv").read_text().splitlines()
                 if not l.startswith("#") and not l.startswith("session")]
        assert len(lines) == 6
        for line in lines:
            parts = line.split(",")
            assert float(parts[8]) < 1e-6  # corrected error
            assert float(parts[5]) > 1.0  # uncorrected error

    def test_calibration_without_truth_warns_and_leaves_output_unchanged(
        self, config_file, tmp_path, capsys
    ):
        from conftest import make_scene
        scene = make_scene()
        meas_rows = synthetic_log_rows(scene, [(36.0, 25.0)] * 3, offset_chips=(4, 2))
        cal_rows = [r.rsplit(",", 2)[0] + ",," for r in synthetic_log_rows(scene, [(30.0, 30.0)])]
        meas = tmp_path / "meas.csv"
        cal = tmp_path / "cal.csv"
        write_log(meas, meas_rows)
        write_log(cal, cal_rows)
        out = tmp_path / "dc"
        assert main(["diffcal", "--config", str(config_file), "--calibration",
                     str(cal), "--log", str(meas), "--out", str(out)]) == 0
        err = capsys.readouterr().err
        assert "skipped" in err
        lines = [l for l in (out / "diffcal_fixes.csv").read_text().splitlines()
                 if not l.startswith("#") and not l.startswith("session")]
        for line in lines:
            parts = line.split(",")
            assert parts[6] == parts[3] and parts[7] == parts[4]  # unchanged


class TestSessionsFromRecords:
    def test_incomplete_sessions_dropped(self, tmp_path):
        rows = [
            "0.0,s0,A,100,50.0,1,1",
            "0.1,s0,B,120,50.0,1,1",
            "0.2,s0,C,110,50.0,1,1",
            "1.0,s1,A,100,50.0,1,1",
            "1.1,s1,B,105,50.0,1,1",
        ]
        log = tmp_path / "log.csv"
        write_log(log, rows)
        records, _ = parse_replay_log(log)
        sessions, dropped = sessions_from_records(records)
        assert len(sessions) == 1
        assert dropped == 1
        assert sessions[0].t_ba_s == pytest.approx(20 * 50e-9 / 1.0)
