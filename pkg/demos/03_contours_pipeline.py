"""From local connectivity to global contours, one stage at a time.

The segmenter never looks at pixels: it eats the per-edge posterior log-odds,
turns them into a sparse affinity graph, takes the smallest eigenvectors of
the normalized Laplacian, and reads contours off the eigenvectors' spatial
gradients. This script runs each stage separately and saves the intermediate
images so you can watch the boundary emerge:

    python3 demos/03_contours_pipeline.py

Outputs land in demos/output/contours/.
"""

from pathlib import Path

import numpy as np

from predseg import io, mrf, optim, segment, synthetic
from predseg.models import ModelConfig

out = Path(__file__).parent / "output" / "contours"
out.mkdir(parents=True, exist_ok=True)

# a quickly trained pixel model (see demo 02 for the slow-motion version)
corpus = out / "corpus"
synthetic.write_two_region_corpus(corpus, 48, shape=(32, 32), seed=7)
result = optim.train(
    ModelConfig(architecture="pixel", neighborhood=4, loss="factor"),
    corpus, out / "run",
    optim.TrainSettings(epochs=40, batch_size=8, crop=(32, 32), seed=0, max_steps=200),
)
model = result.model
head = model.heads[model.config.head_layers[0]]

sample = synthetic.two_region_sample((32, 32), np.random.default_rng(42))
io.write_contour_png(sample.pixels.mean(axis=0), out / "0_input_gray.png")

print("== stage 1: connectivity ==")
fm = model.forward(sample.pixels)[0]
cm = mrf.connectivity_map(fm, model.spec, head)
for off in cm.offsets:
    vals = cm.logodds[off][cm.valid[off]]
    print(f"offset {off}: log-odds range [{vals.min():+.1f}, {vals.max():+.1f}]")
cm.save(out / "1_connectivity")

print()
print("== stage 2: affinity graph + Laplacian ==")
aff = segment.affinity_from_connectivity(cm)
print(f"{aff.node_count} nodes, {len(aff.weights)} undirected edges; "
      f"weights clipped to [{aff.weights.min():.2f}, {aff.weights.max():.2f}] "
      "(bottom 30% of log-odds become the floor)")
lap = segment.graph_laplacian(aff)

print()
print("== stage 3: smallest eigenvectors ==")
vals, vecs = segment.smallest_eigenvectors(lap, 6)
print("eigenvalues:", np.array2string(vals, precision=4))
print("lambda_1 ~ 0 is the trivial constant direction; the next ones cut the")
print("graph where affinity is weakest, i.e. along the region boundary.")
for i in range(1, 4):
    v = vecs[:, i].reshape(32, 32)
    io.write_contour_png((v - v.min()) / (v.max() - v.min()), out / f"2_eigvec{i}.png")

print()
print("== stage 4: contours ==")
contour = segment.eigen_to_contours(vals, vecs, (32, 32))
io.write_contour_png(contour.values, out / "3_contours.png")
io.write_tensor(contour.values, out / "3_contours.pstf")

boundary_rc = tuple(int(v) for v in np.argwhere(sample.boundary)[0])
contour_rc = tuple(int(v) for v in np.unravel_index(contour.values.argmax(), (32, 32)))
print(f"true boundary starts at (row, col) = {boundary_rc}; "
      f"contour max sits at {contour_rc}")
print(f"images in {out}")
print()
print("The one-call version of stages 1-4 is segment.contours(...); the CLI")
print("equivalent is `predseg contours <checkpoint> <image> --out <dir>`.")
