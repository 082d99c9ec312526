import csv
import math
import re
import subprocess
import sys
import time

import pytest

from bdpfl.cli import main

SMOKE = """
[experiment]
seed = 3
clients = 10
rounds = 20
participation = 0.5
[privacy]
mode = {mode}
sigma_client = 2
sigma_instance = 3
batch = 5
{extra}
[data]
per_client = 40
test_size = 400
[output]
csv = {out}/rounds.csv
"""


def write_config(tmp_path, mode="client", extra="", name="c.ini"):
    path = tmp_path / name
    path.write_text(SMOKE.format(mode=mode, extra=extra, out=tmp_path / "run"))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def account(tmp_path, capsys, lines, *flags):
    path = tmp_path / "norms.csv"
    path.write_text("".join(f"{l}\n" for l in lines))
    code = main(["account", str(path), *flags])
    return code, capsys.readouterr()


def _value(out, key):
    return float(re.search(rf"{key} = ([0-9.]+|inf)", out).group(1))


class TestSimulate:
    def test_smoke_run(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        start = time.perf_counter()
        assert main(["simulate", str(cfg)]) == 0
        assert time.perf_counter() - start < 30
        rows = read_rows(tmp_path / "run" / "rounds.csv")
        assert len(rows) == 20 and rows[-1]["round"] == "20"
        for f in ("header.txt", "ledger_bdp.txt", "ledger_dp.txt"):
            assert (tmp_path / "run" / f).exists()
        out = capsys.readouterr().out
        assert "client: 20 rounds" in out and "bdp client" in out

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, mode="joint")
        assert main(["simulate", str(cfg), "--out", str(tmp_path / "a")]) == 0
        assert main(["simulate", str(cfg), "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "rounds.csv").read_bytes() == \
            (tmp_path / "b" / "rounds.csv").read_bytes()
        assert (tmp_path / "a" / "ledger_bdp_instance.txt").exists()

    def test_write_once(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["simulate", str(cfg)]) == 0
        assert main(["simulate", str(cfg)]) == 2
        assert "--overwrite" in capsys.readouterr().err
        assert main(["simulate", str(cfg), "--overwrite"]) == 0

    def test_budget_stop_row(self, tmp_path):
        cfg = write_config(tmp_path, extra="epsilon_budget = 3.0")
        assert main(["simulate", str(cfg)]) == 0
        rows = read_rows(tmp_path / "run" / "rounds.csv")
        assert rows[-1]["flag"] == "budget_stop" and len(rows) < 20

    def test_bad_config_is_runtime_error(self, tmp_path, capsys):
        path = tmp_path / "bad.ini"
        path.write_text("[experiment]\nclients = 4\nparticipation = 1.5\n")
        assert main(["simulate", str(path)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["simulate", str(tmp_path / "nope.ini")]) == 2

    def test_usage_errors(self, capsys):
        assert main([]) == 1
        assert main(["simulate"]) == 1
        assert main(["account", "x", "--sigma", "1"]) == 1
        assert main(["frobnicate"]) == 1

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "bdpfl", "account"], capture_output=True,
                              text=True)
        assert proc.returncode == 1 and "usage error" in proc.stderr


class TestAccount:
    FLAGS = ("--sigma", "4", "--q", "0.05", "--delta", "1e-3")

    def test_all_zero_norms(self, tmp_path, capsys):
        code, cap = account(tmp_path, capsys, ["round,delta_norm"]
                            + [f"{r},0" for r in range(1, 11) for _ in range(3)], *self.FLAGS)
        assert code == 0
        assert "rounds = 10" in cap.out
        assert _value(cap.out, "eps_bdp") == pytest.approx(math.log(2 / 1e-3) / 64, abs=1e-6)

    def test_empty_file(self, tmp_path, capsys):
        code, cap = account(tmp_path, capsys, [], *self.FLAGS)
        assert code == 2
        assert _value(cap.out, "eps_dp") == pytest.approx(math.log(1e3) / 64, abs=1e-6)
        assert "insufficient samples" in cap.err

    def test_malformed_line(self, tmp_path, capsys):
        code, cap = account(tmp_path, capsys, ["1,0.5", "1,0.2", "2;0.3"], *self.FLAGS)
        assert code == 2 and "line 3" in cap.err

    def test_negative_norm(self, tmp_path, capsys):
        code, cap = account(tmp_path, capsys, ["1,-0.5"], *self.FLAGS)
        assert code == 2 and "line 1" in cap.err

    def test_single_sample_round(self, tmp_path, capsys):
        code, cap = account(tmp_path, capsys, ["1,0.5", "1,0.2", "2,0.3"], *self.FLAGS)
        assert code == 2 and "round 2" in cap.err

    def test_bad_flags(self, tmp_path, capsys):
        code, _ = account(tmp_path, capsys, ["1,0.5"], "--sigma", "0", "--q", "0.1",
                          "--delta", "1e-3")
        assert code == 1

    @pytest.mark.xfail(strict=True, reason=(
        "side R of the binomial cost is looser than the exact subsampled-Gaussian moment, "
        "so norms pinned to the clip bound give a BDP epsilon more than 0.1 above DP"))
    def test_norms_at_clip_bound_match_dp(self, tmp_path, capsys):
        code, cap = account(tmp_path, capsys, [f"{r},1.0" for r in range(1, 101) for _ in range(4)],
                            *self.FLAGS)
        assert code == 0
        assert abs(_value(cap.out, "eps_bdp") - _value(cap.out, "eps_dp")) <= 0.1


class TestCompare:
    def test_single_mode_is_usage_error(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["compare", str(cfg), "--modes", "client"]) == 1
        assert main(["compare", str(cfg), "--modes", "client,client"]) == 1
        assert main(["compare", str(cfg), "--modes", "client,dp"]) == 1

    def test_sequential_vs_parallel(self, tmp_path):
        cfg = write_config(tmp_path, mode="client")
        out = tmp_path / "cmp"
        assert main(["compare", str(cfg), "--modes", "instance_seq,instance_par",
                     "--out", str(out)]) == 0
        rows = read_rows(out / "compare.csv")
        seq = [r for r in rows if r["mode"] == "instance_seq"]
        par = [r for r in rows if r["mode"] == "instance_par"]
        assert len(seq) == len(par) == 20
        assert all(float(p["eps_bdp_instance"]) >= float(s["eps_bdp_instance"])
                   for s, p in zip(seq, par))

    def test_client_and_joint(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "cmp"
        assert main(["compare", str(cfg), "--modes", "client,joint", "--out", str(out)]) == 0
        joint = [r for r in read_rows(out / "compare.csv") if r["mode"] == "joint"]
        assert joint and all(math.isfinite(float(r["eps_bdp_client"])) for r in joint)
        assert (out / "joint" / "rounds.csv").exists()
        assert main(["compare", str(cfg), "--modes", "client,joint", "--out", str(out)]) == 2
