import os

import numpy as np
import pytest

from ratiomatch.datasets import BitDataset, gen_ising_data
from ratiomatch.energy import DimensionError, IsingEnergy, LinearEnergy, MlpEnergy
from ratiomatch.metrics import edge_separation, mmd_linear, objective_value_eval
from ratiomatch.objectives import EstimatorSpec
from ratiomatch.samplers import make_rng
from ratiomatch.trainer import (CheckpointError, DivergenceError, TrainConfig, evaluate, load_checkpoint,
                                save_checkpoint, train)


@pytest.fixture(scope="module")
def toy():
    r = make_rng(0, 9)
    return (r.random((400, 6)) < np.linspace(0.1, 0.9, 6)).astype(np.uint8)


def test_lr_zero_leaves_params(toy):
    m = MlpEnergy(6, 8, 1, rng=make_rng(1))
    before = m.params.arrays()
    train(TrainConfig(EstimatorSpec("rmwggis-adv", s=2), lr=0.0, batch_size=16, iterations=25), toy, m)
    for k, v in m.params.arrays().items():
        assert v.tobytes() == before[k].tobytes()


def test_rm_full_decreases_objective(toy):
    m = MlpEnergy(6, 16, 1, rng=make_rng(2))
    o0 = objective_value_eval(m, toy)
    train(TrainConfig(EstimatorSpec("rm-full"), lr=1e-2, batch_size=32, iterations=500), toy, m)
    assert objective_value_eval(m, toy) < o0


@pytest.mark.parametrize("kind", ["rm-full", "rm-g-full", "rmwggis-basic", "rmwggis-adv", "rmwrand"])
def test_runs_are_bitwise_deterministic(tmp_path, toy, kind):
    cfg = TrainConfig(EstimatorSpec(kind, s=3), lr=1e-2, batch_size=24, iterations=12, checkpoint_every=4, seed=3)
    for run in ("a", "b"):
        os.makedirs(tmp_path / run)
        train(cfg, toy, MlpEnergy(6, 8, 2, rng=make_rng(3)), checkpoint_dir=tmp_path / run)
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == ["ckpt_00000004.ckpt", "ckpt_00000008.ckpt", "ckpt_00000012.ckpt", "final.ckpt"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


@pytest.mark.parametrize("model", ["mlp", "ising"])
def test_resume_equals_uninterrupted(tmp_path, toy, model):
    def make():
        if model == "mlp":
            return MlpEnergy(6, 8, 2, rng=make_rng(4))
        return IsingEnergy.learnable_zero(6)
    # batch 48 over 400 rows forces epoch boundaries inside the run
    cfg = TrainConfig(EstimatorSpec("rmwggis-adv", s=3), lr=1e-2, batch_size=48, iterations=20,
                      checkpoint_every=7, l1_strength=0.01)
    os.makedirs(tmp_path / "full")
    os.makedirs(tmp_path / "resumed")
    train(cfg, toy, make(), checkpoint_dir=tmp_path / "full")
    state = load_checkpoint(tmp_path / "full" / "ckpt_00000007.ckpt").state()
    train(cfg, toy, resume=state, checkpoint_dir=tmp_path / "resumed")
    for n in ("ckpt_00000014.ckpt", "final.ckpt"):
        assert (tmp_path / "full" / n).read_bytes() == (tmp_path / "resumed" / n).read_bytes()


def test_resume_with_other_config_fails(tmp_path, toy):
    cfg = TrainConfig(EstimatorSpec("rm-full"), batch_size=16, iterations=3)
    r = train(cfg, toy, MlpEnergy(6, 4, 1), checkpoint_dir=tmp_path)
    state = load_checkpoint(tmp_path / "final.ckpt").state()
    with pytest.raises(CheckpointError):
        train(TrainConfig(EstimatorSpec("rm-full"), lr=0.5, batch_size=16, iterations=6), toy, resume=state)
    # a longer run under the same config is fine
    train(TrainConfig(EstimatorSpec("rm-full"), batch_size=16, iterations=6), toy, resume=state)
    assert r.state.iteration == 3


def test_checkpoint_errors(tmp_path, toy):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")
    r = train(TrainConfig(EstimatorSpec("rm-full"), batch_size=16, iterations=2), toy, MlpEnergy(6, 4, 1))
    p = tmp_path / "c.ckpt"
    save_checkpoint(p, r.state)
    raw = p.read_bytes()
    (tmp_path / "v.ckpt").write_bytes(raw.replace(b"RMCKPT 1", b"RMCKPT 9", 1))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_bytes(raw[:-20])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "g.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "g.ckpt")


def test_checkpoint_roundtrip_exact(tmp_path, toy):
    r = train(TrainConfig(EstimatorSpec("rmwrand", s=2), batch_size=16, iterations=5), toy, MlpEnergy(6, 4, 2))
    save_checkpoint(tmp_path / "c.ckpt", r.state)
    s = load_checkpoint(tmp_path / "c.ckpt").state()
    for k, v in r.state.model.params.arrays().items():
        assert s.model.params[k].data.tobytes() == v.tobytes()
        assert s.adam.m[k].tobytes() == r.state.adam.m[k].tobytes()
        assert s.adam.v[k].tobytes() == r.state.adam.v[k].tobytes()
    assert s.iteration == 5 and s.adam.step == 5 and s.cursor == r.state.cursor
    assert s.estimator_rng.random() == r.state.estimator_rng.random()


def test_divergence_guard(tmp_path, toy):
    m = MlpEnergy(6, 8, 1, rng=make_rng(0))
    cfg = TrainConfig(EstimatorSpec("rm-full"), lr=1e3, batch_size=32, iterations=50)
    with pytest.raises(DivergenceError) as info:
        train(cfg, toy, m, checkpoint_dir=tmp_path)
    assert info.value.checkpoint and os.path.exists(info.value.checkpoint)


def test_dimension_mismatch(toy):
    with pytest.raises(DimensionError):
        train(TrainConfig(iterations=1), toy, MlpEnergy(5, 4, 1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(l1_strength=-1)


def test_metric_log(tmp_path, toy):
    cfg = TrainConfig(EstimatorSpec("rmwggis-adv", s=2), batch_size=16, iterations=6, eval_every=2)
    r = train(cfg, toy, MlpEnergy(6, 4, 1), callbacks=[lambda it, m: {"objective": 1.0}],
              log_path=tmp_path / "log.jsonl")
    assert [x["iteration"] for x in r.log] == [2, 4, 6]
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3 and '"wall_ms"' in lines[0] and '"objective"' in lines[0]


def test_evaluate(toy):
    assert evaluate(LinearEnergy.constant(6), toy)["objective"] == 6.0
    true = IsingEnergy.lattice(3, 0.25)
    assert evaluate(true, np.zeros((4, 9)), ["rmse"], J_true=true.J)["rmse"] == 0.0
    assert mmd_linear(toy, toy).mmd_sq == 0.0
    rep = evaluate(MlpEnergy(6, 4, 1), toy, ["mmd"], n_samples=200, gibbs={"chains": 20, "burn_in": 5, "thin": 1})
    assert rep["mmd_sq"] >= 0


def test_l1_shrinks_non_edges():
    true = IsingEnergy.lattice(3, 0.25)
    ds = gen_ising_data(true, 300, 900, make_rng(0))
    off = {}
    for l1 in (0.0, 10.0):
        m = IsingEnergy.learnable_zero(9)
        train(TrainConfig(EstimatorSpec("rmwggis-adv", s=3), lr=1e-2, batch_size=50, iterations=300,
                          l1_strength=l1), ds, m)
        off[l1] = edge_separation(m.J, true.J)[1]
    assert off[10.0] < off[0.0]
