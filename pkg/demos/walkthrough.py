"""One seed of the method, step by step, using the library API directly.

    python3 demos/walkthrough.py

Builds the keyword sentiment corpus, pretrains a backbone, fits a clean
adapter, attacks it with synonym swaps, fits an adversarial adapter on the
successful attacks and then routes each test sentence between the two
adapters according to prediction entropy.  Runs in a few seconds.
"""

import numpy as np

from adpmixup import (
    TrainConfig,
    adapter_soup,
    calibrate,
    entropy,
    evaluate,
    forward,
    pretrain_backbone,
    tokenize,
    train_adapter,
)
from adpmixup.attacks import AttackSpec, generate_adversarial_dataset, load_synonyms, make_oracle
from adpmixup.baselines import AdapterPredictor, AdpMixupPredictor
from adpmixup.corpus import make_corpus
from adpmixup.mixing import ADV, CLEAN

SEED = 0
V, D, RANK, L = 4096, 32, 8, 64

# %% data: sentences built from polarity keywords with some label noise
pretrain_set = make_corpus(400, 1000 + SEED, name="pretrain")
train_set = make_corpus(600, 2000 + SEED, name="train")
test_set = make_corpus(300, 3000 + SEED, name="test")
print("example sentence:", test_set.items[0])

# %% backbone and clean adapter
backbone = pretrain_backbone(pretrain_set, TrainConfig(learning_rate=0.5, epochs=10, seed=SEED), V, D)
fit = TrainConfig(learning_rate=0.75, epochs=80, seed=SEED)
clean = train_adapter(backbone, train_set, fit, RANK, L, tag="clean")

# %% black-box synonym attack against the clean model
victim = make_oracle(backbone, clean, L)
spec = AttackSpec("word_synonym", budget=0.3, max_queries=500, seed=SEED, synonym_table=load_synonyms(max_candidates=1))
adv_train = generate_adversarial_dataset(victim, train_set, spec)
adv_test = generate_adversarial_dataset(victim, test_set, spec)
print(f"attack succeeded on {len(adv_train)}/{len(train_set)} training and {len(adv_test)}/{len(test_set)} test items")
print("perturbed example:", adv_test.items[0])

# %% adversarial adapter, then entropy ranges of each adapter on its own data
adv = train_adapter(backbone, adv_train, fit, RANK, L, tag="adv")
calib_clean = calibrate(backbone, clean, train_set, CLEAN, 100, L)
calib_adv = calibrate(backbone, adv, adv_train, ADV, 100, L)
print(f"clean entropy range [{calib_clean.min_h:.3f}, {calib_clean.max_h:.3f}], "
      f"adversarial range [{calib_adv.min_h:.3f}, {calib_adv.max_h:.3f}]")

# %% per-sample routing: a confident clean adapter pulls beta toward 1
mixer = AdpMixupPredictor(backbone, clean, (adv,), calib_clean, (calib_adv,), max_len=L)
for name, ds in (("clean", test_set), ("attacked", adv_test)):
    text = ds.items[1][0]
    _, (diag,) = mixer.predict_with_diagnostics([text])
    h = entropy(forward(backbone, clean, tokenize(text, V, L)))
    print(f"{name:>8} text, clean-adapter entropy {h:.3f}: alpha_clean {diag.alpha_clean:.2f}, beta {diag.beta[0]:.2f}")

# %% accuracy on both splits
methods = {
    "clean adapter": AdapterPredictor(backbone, clean, L),
    "adversarial adapter": AdapterPredictor(backbone, adv, L),
    "adapter average": AdapterPredictor(backbone, adapter_soup([clean, adv]), L),
    "entropy-routed mix": mixer,
}
print(f"{'method':<22}{'clean':>8}{'attacked':>10}{'average':>9}")
for name, p in methods.items():
    c, a = evaluate(p, test_set), evaluate(p, adv_test)
    print(f"{name:<22}{c:>8.3f}{a:>10.3f}{np.mean([c, a]):>9.3f}")
