"""Analytic parameter and FLOP audits of the four networks.

Counts are computed from the config alone (no torch modules are built);
the test suite cross-checks them against instantiated-module enumeration.
FLOP conventions: a k x k conv costs 2*k^2*Cin*Cout*Hout*Wout (bias adds
ignored); GroupNorm costs 8 per element, SiLU 5, residual adds 1;
attention adds 4*C*(HW)^2 for the two matmuls plus 5*heads*(HW)^2 for
the softmax. Linear layers cost 2*din*dout.
"""

from dataclasses import dataclass

from .config import ModelConfig

# deployment budget targets for the "full" preset (M params / GFLOPs on a
# 128px LR patch); tolerances are +/-15% on parameters, +/-25% on FLOPs
TARGET_UNET_PARAMS = 158e6
TARGET_AE_PARAMS = 14e6
TARGET_UNET_GFLOPS = 40.0
TARGET_AE_GFLOPS = 102.0
PARAM_TOLERANCE = 0.15
FLOP_TOLERANCE = 0.25


@dataclass
class Tally:
    params: int = 0
    flops: int = 0

    def conv(self, cin, cout, k, out_hw):
        self.params += k * k * cin * cout + cout
        self.flops += 2 * k * k * cin * cout * out_hw[0] * out_hw[1]

    def linear(self, din, dout):
        self.params += din * dout + dout
        self.flops += 2 * din * dout

    def group_norm(self, c, hw):
        self.params += 2 * c
        self.flops += 8 * c * hw[0] * hw[1]

    def silu(self, c, hw):
        self.flops += 5 * c * hw[0] * hw[1]

    def add(self, c, hw):
        self.flops += c * hw[0] * hw[1]

    def res_block(self, cin, cout, hw, time_dim=None):
        self.group_norm(cin, hw)
        self.silu(cin, hw)
        self.conv(cin, cout, 3, hw)
        if time_dim:
            self.linear(time_dim, cout)
            self.add(cout, hw)
        self.group_norm(cout, hw)
        self.silu(cout, hw)
        self.conv(cout, cout, 3, hw)
        if cin != cout:
            self.conv(cin, cout, 1, hw)
        self.add(cout, hw)

    def attention(self, c, hw, heads):
        n = hw[0] * hw[1]
        self.group_norm(c, hw)
        self.conv(c, 3 * c, 1, hw)
        self.conv(c, c, 1, hw)
        self.flops += 4 * c * n * n + 5 * heads * n * n
        self.add(c, hw)


def _half(hw):
    return (hw[0] // 2, hw[1] // 2)


def _double(hw):
    return (hw[0] * 2, hw[1] * 2)


def unet_audit(config: ModelConfig, latent_hw, in_channels=None) -> Tally:
    t = Tally()
    widths = config.unet_widths
    levels = len(widths)
    dt = config.time_embed_dim
    rb = config.num_res_blocks
    in_ch = in_channels or config.latent_channels

    t.linear(dt, dt)
    t.linear(dt, dt)
    t.conv(in_ch, widths[0], 3, latent_hw)

    hw = latent_hw
    for i, w in enumerate(widths):
        for _ in range(rb):
            t.res_block(w, w, hw, dt)
        if i in config.attention_levels:
            t.attention(w, hw, config.attention_heads)
        if i < levels - 1:
            t.conv(w, widths[i + 1], 3, _half(hw))
            hw = _half(hw)

    w_mid = widths[-1]
    t.res_block(w_mid, w_mid, hw, dt)
    t.attention(w_mid, hw, config.attention_heads)
    t.res_block(w_mid, w_mid, hw, dt)

    for i in reversed(range(levels)):
        w = widths[i]
        t.res_block(2 * w, w, hw, dt)
        for _ in range(rb - 1):
            t.res_block(w, w, hw, dt)
        if i in config.attention_levels:
            t.attention(w, hw, config.attention_heads)
        if i > 0:
            t.conv(w, 4 * widths[i - 1], 3, hw)
            hw = _double(hw)

    t.group_norm(widths[0], hw)
    t.silu(widths[0], hw)
    t.conv(widths[0], config.latent_channels, 3, hw)
    return t


def _encoder_audit(widths, stages, rb, latent_channels, in_hw, heads_out=1) -> Tally:
    t = Tally()
    t.conv(3, widths[0], 3, in_hw)
    hw = in_hw
    for s in range(stages):
        for _ in range(rb):
            t.res_block(widths[s], widths[s], hw)
        t.conv(widths[s], widths[s + 1], 3, _half(hw))
        hw = _half(hw)
    for _ in range(rb):
        t.res_block(widths[-1], widths[-1], hw)
    for _ in range(heads_out):
        t.group_norm(widths[-1], hw)
        t.silu(widths[-1], hw)
        t.conv(widths[-1], latent_channels, 3, hw)
    return t


def hr_encoder_audit(config: ModelConfig, hr_hw) -> Tally:
    return _encoder_audit(config.ae_widths, config.hr_stages,
                          config.ae_num_res_blocks, config.latent_channels, hr_hw)


def lr_encoder_audit(config: ModelConfig, lr_hw) -> Tally:
    return _encoder_audit(config.lr_encoder_widths, config.lr_stages,
                          config.ae_num_res_blocks, config.latent_channels,
                          lr_hw, heads_out=2)


def decoder_audit(config: ModelConfig, latent_hw) -> Tally:
    t = Tally()
    widths = config.ae_widths
    c_top = widths[-1]
    hw = latent_hw
    t.conv(config.latent_channels, c_top, 3, hw)
    for _ in range(config.decoder_blocks):
        t.res_block(c_top, c_top, hw)
    for s in reversed(range(config.hr_stages)):
        t.conv(widths[s + 1], 4 * widths[s], 3, hw)
        hw = _double(hw)
        for _ in range(config.ae_num_res_blocks):
            t.res_block(widths[s], widths[s], hw)
    t.group_norm(widths[0], hw)
    t.silu(widths[0], hw)
    t.conv(widths[0], 3, 3, hw)
    return t


def count_params(config: ModelConfig) -> dict:
    """Exact analytic weight+bias counts per submodel."""
    some_hw = (16, 16)  # params do not depend on spatial size
    hr_hw = (some_hw[0] * config.hr_downsample_factor,) * 2
    lr_hw = (some_hw[0] * config.lr_downsample_factor,) * 2
    return {
        "unet": unet_audit(config, some_hw).params,
        "unet_unidirectional": unet_audit(
            config, some_hw, in_channels=2 * config.latent_channels).params,
        "hr_encoder": hr_encoder_audit(config, hr_hw).params,
        "lr_encoder": lr_encoder_audit(config, lr_hw).params,
        "decoder": decoder_audit(config, some_hw).params,
    }


def estimate_flops(config: ModelConfig, input_hw) -> dict:
    """FLOPs per submodel for an LR patch of the given size.

    The UNet and decoder run on the HR latent grid (patch / lr-downsample
    factor); the HR encoder cost is reported for the corresponding HR
    patch (training only).
    """
    lr_hw = tuple(input_hw)
    latent_hw = (lr_hw[0] // config.lr_downsample_factor,
                 lr_hw[1] // config.lr_downsample_factor)
    hr_hw = (lr_hw[0] * config.scale, lr_hw[1] * config.scale)
    return {
        "unet": unet_audit(config, latent_hw).flops,
        "unet_unidirectional": unet_audit(
            config, latent_hw, in_channels=2 * config.latent_channels).flops,
        "hr_encoder": hr_encoder_audit(config, hr_hw).flops,
        "lr_encoder": lr_encoder_audit(config, lr_hw).flops,
        "decoder": decoder_audit(config, latent_hw).flops,
    }


def audit_report(config: ModelConfig, input_hw=(128, 128), with_targets=False) -> str:
    """Human-readable audit; deployment pair = LR encoder + decoder."""
    params = count_params(config)
    flops = estimate_flops(config, input_hw)
    lines = [f"audit at LR patch {input_hw[0]}x{input_hw[1]}",
             f"{'submodel':<22}{'params':>14}{'GFLOPs':>12}"]
    for key in ("unet", "lr_encoder", "decoder", "hr_encoder"):
        note = " (training only)" if key == "hr_encoder" else ""
        lines.append(f"{key:<22}{params[key]:>14,}{flops[key] / 1e9:>12.2f}{note}")
    ae_params = params["lr_encoder"] + params["decoder"]
    ae_flops = flops["lr_encoder"] + flops["decoder"]
    lines.append(f"{'autoencoder (deploy)':<22}{ae_params:>14,}{ae_flops / 1e9:>12.2f}")
    if with_targets:
        def dev(actual, target):
            return 100.0 * (actual - target) / target
        lines.append("")
        lines.append(f"unet params vs {TARGET_UNET_PARAMS / 1e6:.0f}M: "
                     f"{dev(params['unet'], TARGET_UNET_PARAMS):+.1f}% "
                     f"(tolerance +/-{PARAM_TOLERANCE * 100:.0f}%)")
        lines.append(f"autoencoder params vs {TARGET_AE_PARAMS / 1e6:.0f}M: "
                     f"{dev(ae_params, TARGET_AE_PARAMS):+.1f}% "
                     f"(tolerance +/-{PARAM_TOLERANCE * 100:.0f}%)")
        lines.append(f"unet GFLOPs vs {TARGET_UNET_GFLOPS:.0f}: "
                     f"{dev(flops['unet'], TARGET_UNET_GFLOPS * 1e9):+.1f}% "
                     f"(tolerance +/-{FLOP_TOLERANCE * 100:.0f}%)")
        lines.append(f"autoencoder GFLOPs vs {TARGET_AE_GFLOPS:.0f}: "
                     f"{dev(ae_flops, TARGET_AE_GFLOPS * 1e9):+.1f}% "
                     f"(tolerance +/-{FLOP_TOLERANCE * 100:.0f}%)")
    return "\n".join(lines) + "\n"
