"""Small models and datasets shared by several test modules."""
import numpy as np

from uwbdar.adapt import InputAdapter
from uwbdar.model import BranchSpec, EncoderConfig, ModelSpec, build_model, random_bundle

RANGE_SHAPE = (10, 30)  # k = 3
FREQ_SHAPE = (12, 40)


def fusion_model(d=8, seed=0, dtype=np.float64, beta_trainable=True):
    """ISA ViT on a small range map plus the light extractor, initialized from a random bundle."""
    bundle = random_bundle(EncoderConfig(d=d, layers=1, heads=2), seed=seed)
    spec = ModelSpec(
        (BranchSpec("vit", "range", InputAdapter("isa", RANGE_SHAPE)), BranchSpec("light", "freq", input_shape=FREQ_SHAPE)),
        encoder=bundle.config,
        beta_trainable=beta_trainable,
    )
    return build_model(spec, bundle, seed=seed, dtype=dtype), bundle


def fusion_batch(model, n=6, seed=0, dtype=np.float64):
    r = np.random.default_rng(seed)
    ranges = r.standard_normal((n, *RANGE_SHAPE))
    freqs = r.standard_normal((n, *FREQ_SHAPE))
    ad = model.spec.branches[0].adapter
    labels = r.integers(0, model.spec.n_classes, size=n)
    return [ad.patches(ranges).astype(dtype), freqs.astype(dtype)], labels, (ranges, freqs)


def gradient_picks(model, n_per_group=30, seed=0):
    """Random (name, flat index) pairs covering every parameter family, beta included."""
    r = np.random.default_rng(seed)
    groups = {
        "kernel": ["b0.embed.w", "b0.embed.b"],
        "pev": ["b0.pev", "b0.pev_cls", "b0.cls"],
        "attention": [k for k in model.params if ".attn." in k or ".ln1." in k],
        "mlp": [k for k in model.params if ".mlp." in k or ".ln2." in k],
        "freq": [k for k in model.params if ".freq." in k],
        "norm": [k for k in model.params if ".norm." in k],
        "classifier": [k for k in model.params if k.startswith("head.")],
    }
    picks = [("beta", 0)]
    for names in groups.values():
        sizes = np.array([model.params[k].size for k in names], dtype=float)
        for _ in range(n_per_group):
            name = names[r.choice(len(names), p=sizes / sizes.sum())]
            picks.append((name, int(r.integers(model.params[name].size))))
    return picks, groups
