"""Cost figures for the standard VGG11 and ViT-B16 at 224x224 (1 MAC = 1 FLOP)."""
from skewprune.cost import cost_report, layer_flops
from skewprune.models import VGGConfig, VitConfig, build_vgg, build_vit


def main():
    for name, model in (("VGG11", build_vgg(VGGConfig.vgg11(8), materialize=False)),
                        ("ViT-B16", build_vit(VitConfig.vit_b16(8), materialize=False))):
        rep = cost_report(model)
        print(f"{name}: {rep.params / 1e6:.2f}M params, {rep.flops / 1e9:.2f} GFLOPs, "
              f"{rep.memory_mib:.2f} MiB")
        for layer, macs in layer_flops(model):
            if macs:
                print(f"  {layer:<12} {macs / 1e6:10.1f} M")


if __name__ == "__main__":
    main()
