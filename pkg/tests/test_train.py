import json
import math

import pytest
import torch

from bokehgan.data import collate, sample_batch, synthetic_pairset
from bokehgan.discriminator import DiscriminatorConfig, generator_adversarial_loss
from bokehgan.generator import GeneratorConfig, assemble_input
from bokehgan.losses import FeatureExtractor, LossWeights, composite_loss
from bokehgan.train import (
    NumericalError,
    TrainConfig,
    _adam,
    arm_label,
    init_state,
    load_state,
    pretrain_step,
    refine_step,
    run_training,
    save_state,
    start_refine,
)

TINY = GeneratorConfig(width=4, enc_blocks=(1, 1), mid_blocks=1, dec_blocks=(1, 1))
CRITIC = DiscriminatorConfig(base_channels=4)


@pytest.fixture(autouse=True)
def single_thread():
    n = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(n)


@pytest.fixture(scope="module")
def source():
    return synthetic_pairset(4, 2, (32, 32), seed=0, stride=TINY.stride)


def fresh(config=None):
    return init_state(config or TrainConfig(), TINY, CRITIC)


def run_steps(state, source, n, step_fn):
    totals = []
    for _ in range(n):
        batch = sample_batch(source, "train", state.config.batch_size, state.step)
        state, report = step_fn(state, batch)
        totals.append(report.total)
    return state, totals


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_defaults():
    cfg = TrainConfig()
    assert cfg.epochs == (60, 60) and cfg.batch_size == 2 and cfg.lr == 1e-4
    assert (cfg.beta1, cfg.beta2) == (0.0, 0.9)
    assert cfg.pretrain_weights == LossWeights.pretrain() and cfg.refine_weights == LossWeights.refine()


@pytest.mark.parametrize("kwargs", [{"lr": -1.0}, {"beta1": 1.0}, {"beta2": -0.1},
                                    {"epochs": (1,)}, {"batch_size": 0}])
def test_config_errors(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_config_dict_round_trip():
    cfg = TrainConfig(epochs=(3, 4), seed=5, pretrain_weights=LossWeights.pretrain().without_bokeh())
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_adam_matches_hand_trace():
    lr, eps = 0.1, 1e-8
    p = torch.nn.Parameter(torch.tensor([1.5], dtype=torch.float64))
    opt = _adam([p], TrainConfig(lr=lr))
    x, v = 1.5, 0.0
    for t in range(1, 4):
        opt.zero_grad()
        (p**3).sum().backward()
        opt.step()
        g = 3 * x * x
        m = g  # beta1 = 0 keeps no first-moment memory
        v = 0.9 * v + 0.1 * g * g
        x -= lr * m / (math.sqrt(v / (1 - 0.9**t)) + eps)
        assert float(p.detach()) == pytest.approx(x, rel=1e-12)


def test_zero_lr_leaves_params(source):
    state = fresh(TrainConfig(lr=0.0))
    before = {k: v.clone() for k, v in state.generator.state_dict().items()}
    state, report = pretrain_step(state, sample_batch(source, "train", 2, 0))
    assert all(torch.equal(before[k], v) for k, v in state.generator.state_dict().items())
    assert report.total > 0 and set(report.terms) == {"l1", "ssim", "edgediff", "backblur", "foreedge"}
    assert state.step == 1


def test_pretrain_reports_only_stage_one_terms(source):
    _, report = pretrain_step(fresh(), sample_batch(source, "train", 2, 0))
    assert "vgg" not in report.terms and "adv" not in report.terms
    assert report["vgg"] == 0.0 and report["adv"] == 0.0


def test_identical_seeds_identical_trajectories(source):
    _, a = run_steps(fresh(), source, 6, pretrain_step)
    _, b = run_steps(fresh(), source, 6, pretrain_step)
    assert a == b
    _, c = run_steps(fresh(TrainConfig(seed=1)), source, 6, pretrain_step)
    assert a != c


def test_resume_pretrain_is_bitwise(source, tmp_path):
    ref, ref_totals = run_steps(fresh(), source, 15, pretrain_step)
    state, totals = run_steps(fresh(), source, 5, pretrain_step)
    path = save_state(state, tmp_path / "mid.npz")
    resumed, rest = run_steps(load_state(path, TINY), source, 10, pretrain_step)
    assert totals + rest == ref_totals
    assert params_equal(ref.generator, resumed.generator)


def test_resume_refine_is_bitwise(source, tmp_path):
    base, _ = run_steps(fresh(), source, 2, pretrain_step)
    path = save_state(base, tmp_path / "pre.npz")
    ref, ref_totals = run_steps(start_refine(load_state(path)), source, 14, refine_step)
    state, totals = run_steps(start_refine(load_state(path)), source, 4, refine_step)
    mid = save_state(state, tmp_path / "mid.npz")
    resumed, rest = run_steps(load_state(mid), source, 10, refine_step)
    assert totals + rest == ref_totals
    assert params_equal(ref.generator, resumed.generator)
    assert params_equal(ref.critic, resumed.critic)


def test_refine_report(source, tmp_path):
    state = start_refine(fresh())
    state, report = refine_step(state, sample_batch(source, "train", 2, 0))
    assert set(report.terms) == {"l1", "ssim", "vgg", "adv"}
    assert {"d_loss", "gp"} <= set(report.extras) and report.extras["gp"] >= 0
    assert abs(report.total - report.weighted_sum()) < 1e-6


def test_constant_critic_matches_non_adversarial_gradient(source):
    state = fresh()
    inp, tgt, mask = collate(sample_batch(source, "train", 2, 0))
    features = FeatureExtractor()
    # a critic whose weights are all zero scores every image with its bias
    critic = start_refine(fresh()).critic
    with torch.no_grad():
        for p in critic.parameters():
            p.zero_()
        critic.critics[0].net[-1].bias.fill_(0.4)

    def grads(adv_fn):
        state.generator.zero_grad()
        out = state.generator(assemble_input(inp, mask))
        r = composite_loss("refine", inp, out, tgt, mask, LossWeights.refine(),
                           adv_term=adv_fn(out), features=features)
        r.tensor.backward()
        return [p.grad.clone() for p in state.generator.parameters()], r.total

    with_critic, total_a = grads(lambda out: generator_adversarial_loss(critic, out)[0])
    plain, total_b = grads(lambda out: torch.tensor(0.0))
    assert all(torch.allclose(a, b, atol=1e-12) for a, b in zip(with_critic, plain))
    assert total_a - total_b == pytest.approx(-0.2)


def test_non_finite_loss_aborts(source):
    batch = sample_batch(source, "train", 2, 0)
    batch[0].input[0, 0, 0] = float("nan")
    with pytest.raises(NumericalError, match="l1"):
        pretrain_step(fresh(), batch)
    assert torch.isfinite(source.load_pair(batch[0].id).input).all()


def test_stage_guards(source):
    batch = sample_batch(source, "train", 2, 0)
    with pytest.raises(RuntimeError):
        refine_step(fresh(), batch)
    with pytest.raises(RuntimeError):
        pretrain_step(start_refine(fresh()), batch)


def test_arm_labels():
    assert arm_label(TrainConfig(), GeneratorConfig()) == "NAFNet8 (GAN/Bokeh Loss during pretraining)"
    no_bokeh = TrainConfig(pretrain_weights=LossWeights.pretrain().without_bokeh())
    assert no_bokeh.arm == "no_bokeh_loss"
    assert arm_label(no_bokeh, GeneratorConfig()) == "NAFNet8 (GAN/No Bokeh Loss)"


class TestRunTraining:
    def test_smoke(self, source, tmp_path):
        cfg = TrainConfig(epochs=(1, 1), checkpoint_every=1)
        result = run_training(cfg, source, tmp_path, TINY, CRITIC)
        names = sorted(p.name for p in tmp_path.glob("*.npz"))
        assert len(names) >= 2 and "pretrain_final.npz" in names and "refine_final.npz" in names
        records = [json.loads(line) for line in result.metrics_path.read_text().splitlines()]
        kinds = [r["kind"] for r in records]
        assert kinds[0] == "run" and kinds.count("step") == 4 and kinds.count("val") == 4
        assert all(math.isfinite(r["val_psnr"]) for r in records if r["kind"] == "val")

    def test_handoff(self, source, tmp_path):
        seen = []
        result = run_training(TrainConfig(epochs=(1, 0)), source, tmp_path, TINY, CRITIC,
                              on_step=lambda state, report: seen.append((state.stage, state.step)))
        assert seen == [("pretrain", 1), ("pretrain", 2)]
        pre = load_state(tmp_path / "pretrain_final.npz")
        refine = load_state(tmp_path / "refine_final.npz")
        assert refine.stage == "refine" and refine.step == pre.step
        assert params_equal(pre.generator, refine.generator)
        assert params_equal(pre.generator, result.state.generator)
        # the stage-two opening validation scores the unchanged pretrain weights
        vals = result.validation
        assert vals[-1]["stage"] == "refine" and vals[-1]["val_psnr"] == vals[-2]["val_psnr"]

    def test_no_bokeh_arm(self, source, tmp_path):
        cfg = TrainConfig(epochs=(1, 1), pretrain_weights=LossWeights.pretrain().without_bokeh())
        run_training(cfg, source, tmp_path, TINY, CRITIC)
        records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert records[0]["arm_label"] == "NAFNet4 (GAN/No Bokeh Loss)"
        step_keys = {k for r in records if r["kind"] == "step" and r["stage"] == "pretrain" for k in r}
        assert step_keys == {"kind", "stage", "step", "epoch", "l1", "ssim", "total"}

    def test_bitwise_reproducible_checkpoints(self, source, tmp_path):
        cfg = TrainConfig(epochs=(1, 1))
        for name in ("a", "b"):
            run_training(cfg, source, tmp_path / name, TINY, CRITIC)
        for f in ("pretrain_final.npz", "refine_final.npz", "metrics.jsonl"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
