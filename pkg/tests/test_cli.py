import csv
import dataclasses
import json

import numpy as np
import pytest

from offpolicy_sgd import cli, verify
from offpolicy_sgd.engine import StepSchedule, step_size
from offpolicy_sgd.features import build_loss_model


def write_config(path, **fields):
    path.write_text(json.dumps(fields))
    return str(path)


def last_row(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))[-1]


def test_single_state_evaluate_matches_scalar_recursion(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", mdp={"generator": "single_state"}, T=1000)
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    row = last_row(tmp_path / "o" / "seed_0.csv")
    # TD(0) on one state: x <- x + eta (1 - x/2), c = 1 - gamma = 0.5, eta1 = 2/c
    sched = StepSchedule.contraction(0.5)
    x, total = 0.0, 0.0
    for t in range(1, 1001):
        x = x + step_size(sched, t) * (1 - 0.5 * x)
        total += x
    bar = total / 1001
    assert int(row["t"]) == 1000
    assert float(row["loss_gap"]) == pytest.approx(0.5 * (1 - 0.5 * bar) ** 2, rel=1e-9)
    assert float(row["loss_gap"]) <= 1e-4
    assert float(row["dist_sq"]) == pytest.approx((x - 2.0) ** 2, rel=1e-9, abs=1e-30)
    assert "loss_gap" in capsys.readouterr().out


def test_reruns_are_byte_identical(tmp_path):
    cfg = write_config(
        tmp_path / "c.json", mdp={"generator": "random", "n_states": 4, "n_actions": 2, "seed": 3},
        behavior={"random": 1}, target={"random": 2}, rule="td_sgd", T=3000, seeds=[0, 1],
    )
    outs = []
    for name in ("a", "b"):
        assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path / name), "--quiet"]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"seed_0.csv", "seed_1.csv", "mean.csv", "summary.json"}


def mdp_document(transition):
    n = len(transition)
    return {
        "n_states": n, "n_actions": 1, "gamma": 0.9,
        "transition": transition,
        "rewards": [[[{"r": 0.0, "p": 1.0}]] for _ in range(n)],
    }


def test_malformed_mdp_exits_2(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps(mdp_document([[[0.5, 0.75]], [[0.0, 1.0]]])))
    cfg = write_config(tmp_path / "c.json", mdp={"path": "m.json"}, T=10)
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "row (0, 0) sums to 1.25" in capsys.readouterr().err


def test_negative_probability_exits_2(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps(mdp_document([[[1.3, -0.3]], [[0.0, 1.0]]])))
    cfg = write_config(tmp_path / "c.json", mdp={"path": "m.json"}, T=10)
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "transition" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.json", mdp={"generator": "single_state"}, horizon=5)
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_mdp_gen_writes_loadable_files(tmp_path):
    out = tmp_path / "g"
    assert cli.main(["mdp-gen", "--n-states", "4", "--n-actions", "2", "--seed", "7", "--out", str(out), "--quiet"]) == 0
    assert {p.name for p in out.iterdir()} == {"mdp.json", "target.json", "behavior.json"}
    cfg = write_config(tmp_path / "c.json", mdp={"path": str(out / "mdp.json")},
                       target={"path": str(out / "target.json")}, T=200)
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0


def test_learn_recovers_stay_or_swap(tmp_path):
    cfg = write_config(tmp_path / "c.json", mdp={"generator": "stay_or_swap"}, K=3, T_eval=20000)
    assert cli.main(["learn", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    policy = json.loads((tmp_path / "o" / "policy_0.json").read_text())
    np.testing.assert_array_equal(policy["probs"], [[1.0, 0.0], [0.0, 1.0]])
    report = json.loads((tmp_path / "o" / "report_0.json").read_text())
    assert report["final_is_optimal"] and report["diagnostics"] == []
    assert len(report["rounds"]) == 4


def test_learn_with_no_rounds(tmp_path):
    cfg = write_config(tmp_path / "c.json", mdp={"generator": "stay_or_swap"}, K=0, T_eval=100)
    assert cli.main(["learn", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    lines = (tmp_path / "o" / "report_0.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("0,")


def test_learn_reports_missing_support(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", mdp={"generator": "stay_or_swap"}, K=1, T_eval=2000,
                       behavior={"probs": [[0.5, 0.5], [1.0, 0.0]]}, initial_policy="uniform")
    assert cli.main(["learn", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 0
    report = json.loads((tmp_path / "o" / "report_0.json").read_text())
    assert any("action 1 in state 1" in line for line in report["diagnostics"])
    assert "diagnostic:" in capsys.readouterr().err


def test_rate_fit_and_slope_gate(tmp_path, capsys):
    path = tmp_path / "r.csv"
    rows = ["t,eta,loss_gap,dist_sq,e_t"] + [f"{t},1.0,{1.0 / t},," for t in sorted({int(x) for x in np.geomspace(1, 1e5, 200)})]
    path.write_text("\n".join(rows) + "\n")
    out = tmp_path / "fit"
    assert cli.main(["rate-fit", str(path), "--out", str(out)]) == 0
    fit = json.loads((out / "rate_fit.json").read_text())
    assert fit["slope"] == pytest.approx(-1.0, abs=1e-9)
    assert cli.main(["rate-fit", str(path), "--max-slope", "-1.5", "--quiet"]) == 1
    assert "exceeds" in capsys.readouterr().err
    assert cli.main(["rate-fit", str(tmp_path / "missing.csv")]) == 2


def flipped_sign_builder(*args, **kwargs):
    """Loss model whose curvature matrices use +gamma phi_next instead of -gamma phi_next."""
    model = build_loss_model(*args, **kwargs)
    phi, zeta, nxt, g = model.features.phi, model.features.zeta, model.moments.phi_next, model.gamma
    lifted = phi + zeta[None, :]
    return dataclasses.replace(
        model,
        d_matrix=phi.T @ phi + g * phi.T @ nxt + np.outer(zeta, zeta),
        td0_jacobian=lifted.T @ (lifted + g * nxt),
    )


def test_contraction_check_catches_sign_error():
    assert verify.check_contraction().passed
    assert not verify.check_contraction(flipped_sign_builder).passed


def test_verify_reports_every_check(capsys):
    code = cli.main(["verify"])
    out = capsys.readouterr().out
    lines = [ln for ln in out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) >= 12
    failed = {ln.split()[1].rstrip(":") for ln in lines if ln.startswith("FAIL")}
    # only the two inequalities that do not hold as stated fail, each with an explanation
    assert failed == set(verify.KNOWN_GAPS)
    assert out.count("why:") == len(failed)
    assert code == 1


def test_verify_fails_on_sign_error(monkeypatch, capsys):
    monkeypatch.setattr(verify, "build_loss_model", flipped_sign_builder)
    monkeypatch.setattr(verify, "all_checks", lambda build=None: [lambda: verify.check_contraction()])
    assert cli.main(["verify"]) == 1
    assert "FAIL  mean_direction_contraction" in capsys.readouterr().out
