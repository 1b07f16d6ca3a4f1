"""Regenerate the fixed toy checkpoint used by the no-training property tests.

Run from the repository root:  python tests/fixtures/make_toy_checkpoint.py
"""
from pathlib import Path

import torch

from tforge import attacks, data, models, training

OUT = Path(__file__).parent / "patch_tiny"


def main():
    torch.manual_seed(0)
    train, test = data.synthetic_blobs(n_train=2000, n_test=600, seed=0)
    spec = attacks.make_spec("patch", 3, seed=1)
    poisoned = attacks.poison_dataset(train, spec, seed=0)
    model = models.build_model("tiny_cnn", 10, seed=0)
    ck = training.train(model, poisoned, training.TrainConfig(epochs=6, batch_size=64, augment=False))
    acc, asr = training.evaluate(model, test, spec)
    ck.metrics = {"accuracy": acc, "asr_inj": asr}
    ck.trigger = spec.family
    ck.save(OUT)
    spec.save(OUT / "trigger.json")
    print(f"saved {OUT}: accuracy {acc:.4f}, ASR-Inj {asr:.4f}")


if __name__ == "__main__":
    main()
