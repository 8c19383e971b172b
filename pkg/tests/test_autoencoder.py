import dataclasses

import numpy as np
import pytest
import torch

from frozen import frozen_stage1_loss
from rarsq.autodiff import backward, finite_diff_check
from rarsq.autoencoder import (
    SkillAutoencoder,
    Stage1Config,
    TrainingDiverged,
    stage1_losses,
    train_stage1,
    write_metrics_csv,
)
from rarsq.envlab import TrajectoryDatasetSpec, gen_trajectories

BOOKS = [[[1.0, 0.0], [0.0, 1.0]], [[0.0, 0.2], [0.0, -0.2]]]


def toy_model(mode="rotation", **kw):
    cfg = Stage1Config(mode=mode, horizon=1, action_dim=2, latent_dim=2, codebook_size=2, **kw)
    model = SkillAutoencoder(cfg).double()
    model.stack.vectors.data.copy_(torch.tensor(BOOKS, dtype=torch.float64))
    model.stack.initialized = True
    return model


def test_zero_encoder_gives_zero_latent():
    model = toy_model()
    for p in model.encoder.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(model.encode(torch.randn(3, 1, 2, dtype=torch.float64)), torch.zeros(3, 2, dtype=torch.float64))


def test_identity_like_linear_encoder():
    model = toy_model()
    with torch.no_grad():
        first, last = model.encoder[0], model.encoder[2]
        first.weight.copy_(torch.cat([torch.eye(2), -torch.eye(2), torch.zeros(124, 2)]).double())
        first.bias.zero_()
        last.weight.zero_()
        last.weight[:, :4] = torch.tensor([[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]])
        last.bias.zero_()
    a = torch.tensor([[[0.3, -0.7]]], dtype=torch.float64)
    assert torch.allclose(model.encode(a), a[:, 0], atol=1e-15)


def test_encoder_is_reproducible():
    cfg = Stage1Config(seed=3)
    torch.manual_seed(cfg.seed)
    a = SkillAutoencoder(cfg)
    torch.manual_seed(cfg.seed)
    b = SkillAutoencoder(cfg)
    x = torch.rand(4, 8, 2) * 2 - 1
    assert torch.equal(a.encode(x), b.encode(x))


def test_zero_decoder_recon_is_mean_square():
    model = toy_model()
    with torch.no_grad():
        for p in model.decoder.parameters():
            p.zero_()
    a = torch.tensor([[[0.5, -0.25]], [[1.0, 0.0]]], dtype=torch.float64)
    _, _, losses = model.reconstruct(a)
    assert losses["recon"].item() == pytest.approx(a.pow(2).mean().item(), abs=1e-15)


def test_exact_hit_commitment_equals_distance():
    model = toy_model()
    z = torch.tensor([[1.0, 0.2]], dtype=torch.float64, requires_grad=True)
    path = model.stack.quantize(z)
    losses = stage1_losses(torch.zeros(1, 1, 2, dtype=torch.float64), torch.zeros(1, 1, 2, dtype=torch.float64),
                           path, beta=1.0)
    # depth 1 hits (1,0) with residual (0,0.2); depth 2 hits (0,0.2) exactly
    assert losses["commit"].item() == pytest.approx(0.2**2 + 0.0, abs=1e-12)


def reference_losses(model, chunks, beta):
    """Scalar reference: encoder, two-depth rotation quantizer, decoder, losses."""
    books = np.array(BOOKS)
    recon, commit = 0.0, 0.0
    for a in chunks:
        with torch.no_grad():
            z = model.encoder(torch.from_numpy(a.reshape(1, -1)))[0].numpy()
        r, zh = z.copy(), np.zeros(2)
        for d in range(2):
            k = int(np.argmin([((r - e) ** 2).sum() for e in books[d]]))
            e = books[d, k]
            rh, eh = r / np.linalg.norm(r), e / np.linalg.norm(e)
            lam = (rh + eh) / np.linalg.norm(rh + eh)
            m = np.eye(2) - 2 * np.outer(lam, lam) + 2 * np.outer(eh, rh)
            q = np.linalg.norm(e) / np.linalg.norm(r) * m @ r
            commit += ((r - q) ** 2).sum()
            zh, r = zh + q, r - q
        with torch.no_grad():
            out = model.decoder(torch.from_numpy(zh[None]))[0].numpy()
        recon += ((a.reshape(-1) - out) ** 2).sum()
    n = len(chunks)
    return recon / (n * chunks[0].size), beta * commit / n


def test_toy_losses_match_reference(rng):
    model = toy_model(beta=0.7)
    chunks = rng.uniform(-1, 1, (6, 1, 2))
    _, _, losses = model.reconstruct(torch.from_numpy(chunks))
    recon, commit = reference_losses(model, chunks, 0.7)
    assert losses["recon"].item() == pytest.approx(recon, rel=1e-10)
    assert losses["commit"].item() == pytest.approx(commit, rel=1e-10)
    assert losses["total"].item() == pytest.approx(recon + commit, rel=1e-10)


@pytest.mark.parametrize("mode", ["rotation", "ste"])
def test_codebooks_get_no_gradient_through_the_frozen_factor(mode, rng):
    model = toy_model(mode, codebook_learning="loss")
    model.stack.vectors.data.copy_(torch.tensor(BOOKS, dtype=torch.float64))
    chunks = torch.from_numpy(rng.uniform(-1, 1, (5, 1, 2)))
    z = model.encode(chunks)
    path = model.stack.quantize(z)
    losses = stage1_losses(chunks, model.decode(path.z_hat), path, 0.25)
    grads = torch.autograd.grad(losses["total"], [model.stack.vectors, *model.encoder.parameters()],
                                allow_unused=True)
    assert grads[0] is None or torch.count_nonzero(grads[0]) == 0
    # moving the codes changes the forward loss
    with torch.no_grad():
        model.stack.vectors.add_(0.05)
    _, _, moved = model.reconstruct(chunks)
    assert moved["total"].item() != pytest.approx(losses["total"].item(), abs=1e-9)


@pytest.mark.parametrize("mode", ["rotation", "ste"])
def test_encoder_gradient_matches_finite_differences(mode, rng):
    model = toy_model(mode)
    chunks = torch.from_numpy(rng.uniform(-1, 1, (4, 1, 2)))
    params = {k: v.detach().clone() for k, v in model.encoder.named_parameters()}
    frozen, live = frozen_stage1_loss(model, chunks, params)
    assert frozen(params).item() == pytest.approx(live(params).item(), rel=1e-12)
    leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    analytic = backward(live(leaves), leaves)
    assert finite_diff_check(frozen, params, analytic=analytic) < 1e-5


def test_memorizes_a_single_chunk():
    chunk = np.linspace(-0.8, 0.9, 16, dtype=np.float32).reshape(1, 8, 2)
    cfg = Stage1Config(batch_size=1, epochs=400, warmup_epochs=5, lr=3e-3)
    result = train_stage1(chunk, cfg)
    assert result.metrics[-1]["recon"] < 1e-4
    assert result.metrics[-1]["recon"] < result.metrics[0]["recon"]


def test_training_is_deterministic_and_writes_csv(tmp_path):
    chunks, _ = gen_trajectories(TrajectoryDatasetSpec(chunks_per_mode=32, seed=1))
    cfg = Stage1Config(epochs=3, warmup_epochs=1)
    a = train_stage1(chunks, cfg, tmp_path / "a.csv")
    b = train_stage1(chunks, cfg, tmp_path / "b.csv")
    assert a.metrics == b.metrics
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "epoch,recon,commit,quant_l1,active_codes_d1,active_codes_d2,perplexity_d1,perplexity_d2"
    assert a.model.to_bytes() == b.model.to_bytes()


def test_checkpoint_round_trip(tmp_path):
    chunks, _ = gen_trajectories(TrajectoryDatasetSpec(chunks_per_mode=16, seed=2))
    model = train_stage1(chunks, Stage1Config(epochs=2, warmup_epochs=1, decoder="attention", hidden=32)).model
    model.save(tmp_path / "s1.bin")
    back = SkillAutoencoder.load(tmp_path / "s1.bin")
    assert back.to_bytes() == model.to_bytes()
    x = torch.from_numpy(model.normalizer.normalize(chunks[:16]))
    model.eval(), back.eval()
    assert torch.equal(model.reconstruct(x)[0], back.reconstruct(x)[0])
    assert torch.equal(model.codes_for(x), back.codes_for(x))


def test_divergence_aborts():
    chunks = np.random.default_rng(0).uniform(-1, 1, (64, 8, 2)).astype(np.float32)
    with pytest.raises(TrainingDiverged):
        train_stage1(chunks, Stage1Config(epochs=5, lr=1e4, warmup_epochs=0, beta=1e6))


def test_config_validation():
    with pytest.raises(ValueError):
        Stage1Config(beta=0)
    with pytest.raises(ValueError):
        Stage1Config(commit_grad="both")
    with pytest.raises(ValueError):
        SkillAutoencoder(Stage1Config(decoder="gru"))
    with pytest.raises(ValueError):
        train_stage1(np.zeros((0, 8, 2)), Stage1Config())


def test_nan_loss_is_reported():
    model = toy_model()
    with torch.no_grad():
        model.encoder[0].weight.fill_(np.nan)
    with pytest.raises(FloatingPointError):
        model.reconstruct(torch.zeros(1, 1, 2, dtype=torch.float64))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_recon_improves_on_synthetic_data(seed):
    chunks, _ = gen_trajectories(TrajectoryDatasetSpec(chunks_per_mode=64, seed=seed))
    metrics = train_stage1(chunks, dataclasses.replace(Stage1Config(), epochs=8, seed=seed)).metrics
    assert metrics[-1]["recon"] < metrics[0]["recon"]


def test_metrics_csv_formats_floats(tmp_path):
    write_metrics_csv([{"epoch": 1, "recon": 1 / 3, "commit": 0.5, "quant_l1": 2.0,
                        "active_codes_d1": 4, "perplexity_d1": 3.9}], tmp_path / "m.csv", 1)
    assert (tmp_path / "m.csv").read_text().splitlines()[1] == "1,0.33333333,0.5,2,4,3.9"
