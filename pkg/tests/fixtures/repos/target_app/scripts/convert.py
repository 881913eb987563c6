import sys

import torch


def main(checkpoint_path):
    state = torch.load(checkpoint_path)
    torch.save(state, checkpoint_path + ".converted")
    return state


if __name__ == "__main__":
    main(sys.argv[1])
