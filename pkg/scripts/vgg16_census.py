"""Print the layer table and parameter counts of the VGG16 classifier."""
import argparse

from agbada.model import build_model, set_trainable


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--input-size", type=int, default=180)
    ap.add_argument("--unfreeze-k", type=int, default=4)
    args = ap.parse_args()
    model = build_model("vgg16", args.input_size)
    set_trainable(model, "last_k_convs", args.unfreeze_k)
    print(model.summary())
    head = model.head_start
    base = sum(layer.n_params for layer in model.layers[:head])
    print(f"base {base:,} / head {model.parameter_count() - base:,}")


if __name__ == "__main__":
    main()
