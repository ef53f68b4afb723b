# %% [markdown]
# # Residual quantization of a synthetic scene
#
# A scene is a cloud of anchors, each a 3-D position with a 16-dim feature.
# Stage 1 snaps a feature to its nearest coarse codeword. Every later stage
# quantizes what is left with one shared residual codebook. The residual
# codebook's entry 0 is the zero vector, so a stage can never make things worse.

# %%
import numpy as np

from scar import CodecConfig, Rng, dequantize, quantize, train_codebooks
from scar.harness import scene_cloud

cfg = CodecConfig.desk(n_anchors=1000, K_base=64, K_res=64)
cloud = scene_cloud(cfg, seed=0)
print(f"{cloud.n} anchors, feature dim {cloud.d}, feature variance {cloud.features.var():.4f}")

# %% [markdown]
# Train both codebooks with k-means++ seeding followed by EMA updates, then
# quantize. `norms[:, m]` is the length of the residual left after stage m+1.

# %%
books = train_codebooks(cloud.features, cfg, Rng(1))
idx, norms = quantize(cloud.features, books, cfg.M)
for m in range(cfg.M):
    recon = dequantize(idx, books, m + 1)
    mse = ((recon - cloud.features) ** 2).mean()
    print(f"stages 1..{m + 1}: mean residual norm {norms[:, m].mean():.4f}   MSE {mse:.5f}")

assert np.all(np.diff(norms, axis=1) <= 0)

# %% [markdown]
# How often does each stage pick the zero codeword? It comes up more in late
# stages, once the residual is small.

# %%
for m in range(1, cfg.M):
    print(f"stage {m + 1}: {np.mean(idx.indices[:, m] == 0):.1%} of anchors chose the zero codeword")
