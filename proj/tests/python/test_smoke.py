import json

import numpy as np
import pytest

import i2a


def test_builtin_prompts():
    prompts = i2a.builtin_prompts()
    assert prompts == [
        "make it at night",
        "make it in snow",
        "make it a sketch painting",
        "make it a vintage photo",
    ]


def test_rendered_prompt_carries_the_guideline():
    text = i2a.render_prompt("a panda bear is looking at the camera", "panda")
    assert (
        "without altering the inherent nature or category of objects within the image"
        in text
    )
    assert '"input": "a panda bear is looking at the camera"' in text
    assert "Please write edits for the following samples:" in text


def test_penalty_hinge():
    assert i2a.penalty(0.3, 0.3, 100.0) == 0.0
    assert i2a.penalty(0.4, 0.3, 100.0) == pytest.approx(10.0)
    assert i2a.penalty(0.1, 0.3, 5.0) == 0.0


def test_lpips_identity_value():
    a = np.zeros((2, 2, 1))
    b = np.full((2, 2, 1), 0.5)
    assert i2a.lpips_identity(a, b) == pytest.approx(1.0)
    assert i2a.lpips_identity(a, a) == 0.0


def _linear_classifier(seed=0, pixels=4, classes=3):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(classes, pixels))
    b = rng.normal(size=classes) * 0.1
    return i2a.LinearClassifier(w, b)


def test_fgsm_bound_and_box():
    clf = _linear_classifier()
    x = np.full((2, 2, 1), 0.5)
    adv = i2a.fgsm(x, 0, clf, 0.1)
    assert np.all(np.abs(adv - x) <= 0.1)
    assert np.all((adv >= 0.0) & (adv <= 1.0))


def test_pgd_and_mim_respect_epsilon():
    clf = _linear_classifier(seed=3)
    rng = np.random.default_rng(5)
    x = rng.uniform(0.2, 0.8, size=(2, 2, 1))
    cfg = i2a.NoiseAttackConfig()
    cfg.epsilon = 4.0 / 255.0
    cfg.steps = 10
    cfg.step_size = 1.0 / 255.0
    for fn in (i2a.pgd, i2a.mim):
        adv = fn(x, 0, clf, cfg)
        assert np.max(np.abs(adv - x)) <= cfg.epsilon
        assert adv.min() >= 0.0 and adv.max() <= 1.0


def _mock_backend():
    opts = i2a.MockBackendOptions()
    opts.latent = [2, 2, 1]
    opts.image = [2, 2, 1]
    opts.steps = 2
    opts.seed = 7
    return i2a.MockBackend(opts)


def test_mock_backend_shapes():
    backend = _mock_backend()
    assert backend.latent_shape() == [2, 2, 1]
    z = backend.encode(np.full((2, 2, 1), 0.5))
    assert z.shape == (2, 2, 1)
    img = backend.decode(z)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_attack_runs_and_is_deterministic():
    backend = _mock_backend()
    clf = _linear_classifier(seed=11, pixels=4, classes=2)
    phi = i2a.IdentityFeatures(1.0, True)
    cfg = i2a.AttackConfig()
    cfg.T = 2
    cfg.N = 4
    cfg.seed = 123
    x = np.full((2, 2, 1), 0.5)
    first = i2a.i2a_attack(x, "make it at night", 0, clf, backend, phi, cfg)
    second = i2a.i2a_attack(x, "make it at night", 0, clf, backend, phi, cfg)
    assert set(first) >= {
        "adversarial",
        "success",
        "distance",
        "constraint_met",
        "iterations",
        "projected",
        "alpha",
        "beta",
    }
    np.testing.assert_array_equal(first["adversarial"], second["adversarial"])
    assert first["distance"] == second["distance"]
    assert np.all((first["alpha"] >= 0.0) & (first["alpha"] <= 1.0))
    assert first["iterations"] <= cfg.N


def test_benign_sample_is_deterministic_and_valid():
    backend = _mock_backend()
    x = np.full((2, 2, 1), 0.4)
    a = i2a.sample_benign(backend, x, "make it in snow", seed=9)
    b = i2a.sample_benign(backend, x, "make it in snow", seed=9)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def _write_ppm(path, arr):
    h, w, _ = arr.shape
    data = (np.clip(arr, 0.0, 1.0) * 255).round().astype(np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data)


def test_evaluate_end_to_end(tmp_path):
    rng = np.random.default_rng(2)
    items = []
    for idx in range(4):
        name = f"img{idx}"
        _write_ppm(tmp_path / f"{name}.ppm", rng.uniform(0.2, 0.8, size=(16, 16, 3)))
        items.append({"id": name, "path": f"{name}.ppm", "label": idx % 3})
    manifest = {"resize": [16, 16], "labels": ["a", "b", "c"], "items": items}
    (tmp_path / "dataset.json").write_text(json.dumps(manifest))

    w = rng.normal(size=(3, 16 * 16 * 3)) * 0.05
    clf = {"weights": w.tolist(), "bias": [0.0, 0.0, 0.0]}
    (tmp_path / "clf.json").write_text(json.dumps(clf))

    config = "\n".join(
        [
            "attack = i2a",
            "T = 2",
            "N = 3",
            f"dataset = {tmp_path / 'dataset.json'}",
            "prompts = make it in snow",
            "backend = mock-linear",
            "backend.latent = 4x4x2",
            "backend.image = 16x16x3",
            "backend.T = 2",
            f"classifier = linear:{tmp_path / 'clf.json'}",
            "phi = identity-rms",
        ]
    )
    (tmp_path / "run.conf").write_text(config + "\n")

    out = i2a.evaluate(str(tmp_path / "run.conf"), str(tmp_path / "out"), seed=3, workers=2)
    assert out["records"] == 4
    assert not out["any_errors"]
    assert out["csv"].startswith("group,prompt,source_model,target_model,count,accuracy_pct")
    assert (tmp_path / "out" / "records.jsonl").exists()
    assert (tmp_path / "out" / "img0__make-it-in-snow.png").exists()
