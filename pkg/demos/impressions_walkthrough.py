"""Train a small classifier, then rebuild inputs for each class from its weights alone.

    python3 demos/impressions_walkthrough.py
"""

import numpy as np

from fedimpress.data import generate_synthetic_dataset
from fedimpress.impressions import (
    SynthesisConfig,
    class_similarity_matrix,
    concentration_vector,
    impressions_for_class,
)
from fedimpress.nn import ModelSpec, TrainConfig, accuracy, build_classifier, forward, last_layer_weights, train


def main():
    data = generate_synthetic_dataset(4, 300, 10, 5.0, seed=0)
    model = build_classifier(ModelSpec(10, 4, (16,), "relu", init_seed=1), range(4))
    model = train(model, data.features, data.labels, TrainConfig(epochs=20))
    print(f"training accuracy: {accuracy(model, data.labels, data.features):.3f}")

    csm = class_similarity_matrix(last_layer_weights(model))
    np.set_printoptions(precision=2, suppress=True)
    print("class similarity matrix:")
    print(csm.matrix)

    cfg = SynthesisConfig(samples_per_class=100, seed=7)
    for k in range(4):
        alpha = concentration_vector(csm, k, cfg.dirichlet_scale, cfg.concentration_floor)
        batch = impressions_for_class(model, k, cfg)
        hit = np.mean(forward(model, batch.features).predictions() == k)
        # impressions are not samples of the class; compare where they sit with the true mean
        true_mean = data.features[data.labels == k].mean(axis=0)
        cos = batch.features.mean(axis=0) @ true_mean / (
            np.linalg.norm(batch.features.mean(axis=0)) * np.linalg.norm(true_mean))
        print(f"class {k}: concentration {alpha}, classified back {hit:.0%}, "
              f"cosine to the real class mean {cos:.2f}")


if __name__ == "__main__":
    main()
