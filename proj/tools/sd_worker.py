#!/usr/bin/env python3
"""Bridge worker serving Stable Diffusion v1.5 to cellstyle::BridgeBackbone.

Speaks the framed protocol described in include/cellstyle/sd_adapter.hpp over
stdin/stdout. Requires torch, diffusers and transformers, and a local
diffusers-format checkpoint directory (unet/, vae/, text_encoder/, tokenizer/).
Nothing is downloaded at runtime; fetch the checkpoint beforehand, e.g.

    huggingface-cli download stable-diffusion-v1-5/stable-diffusion-v1-5 \
        --local-dir ckpt/sd15 --include "unet/*" "vae/*" "text_encoder/*" "tokenizer/*" model_index.json

Timesteps: the parent indexes alpha_bar with alpha_bar[0] = 1, so its t maps
to the UNet's t - 1 (t = 0 is evaluated at UNet timestep 0).

Attention layers are the self-attention (attn1) modules of the UNet decoder
(up_blocks) in forward order: up_blocks.1 to up_blocks.3, three transformer
blocks each, nine in total. The last six are the up_blocks.2 and up_blocks.3
layers. Use --layers to restrict or reorder.
"""

import argparse
import json
import struct
import sys

MODEL_NAME = "stable-diffusion-v1-5"
PROTOCOL = 1
VAE_SCALE = 0.18215


def read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError
        buf += chunk
    return buf


def receive(stream):
    (hl,) = struct.unpack("<I", read_exact(stream, 4))
    header = json.loads(read_exact(stream, hl))
    (pl,) = struct.unpack("<Q", read_exact(stream, 8))
    payload = read_exact(stream, pl) if pl else b""
    return header, payload


def send(stream, header, payload=b""):
    h = json.dumps(header).encode()
    stream.write(struct.pack("<I", len(h)) + h + struct.pack("<Q", len(payload)) + payload)
    stream.flush()


class Worker:
    def __init__(self, args, rx, tx):
        import numpy as np
        import torch
        from diffusers import AutoencoderKL, UNet2DConditionModel
        from transformers import CLIPTextModel, CLIPTokenizer

        self.np, self.torch = np, torch
        self.rx, self.tx = rx, tx
        self.device = torch.device(args.device)
        self.latent = args.latent_size
        ckpt = args.checkpoint
        self.unet = UNet2DConditionModel.from_pretrained(ckpt, subfolder="unet").to(self.device).eval()
        self.vae = AutoencoderKL.from_pretrained(ckpt, subfolder="vae").to(self.device).eval()
        cfg = self.unet.config
        self.model = (
            MODEL_NAME
            if cfg.cross_attention_dim == 768 and list(cfg.block_out_channels) == [320, 640, 1280, 1280]
            else "unknown-unet"
        )

        tok = CLIPTokenizer.from_pretrained(ckpt, subfolder="tokenizer")
        enc = CLIPTextModel.from_pretrained(ckpt, subfolder="text_encoder").to(self.device).eval()
        ids = tok([""], padding="max_length", max_length=tok.model_max_length, return_tensors="pt").input_ids
        with torch.no_grad():
            self.empty = enc(ids.to(self.device))[0]

        self.modules = {}
        for name, module in self.unet.named_modules():
            if name.startswith("up_blocks.") and name.endswith("attn1"):
                self.modules[name] = module
        self.layers = args.layers.split(",") if args.layers else list(self.modules)
        for name in self.layers:
            if name not in self.modules:
                raise SystemExit(f"unknown layer {name}")
        self.hooking = False
        self.timestep = 0
        for name in self.layers:
            self.modules[name].set_processor(self._processor(name))

    def _processor(self, layer):
        worker = self

        class Processor:
            def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, **kwargs):
                torch = worker.torch
                b, n, _ = hidden_states.shape
                q = attn.to_q(hidden_states)
                k = attn.to_k(hidden_states)
                v = attn.to_v(hidden_states)
                h = attn.heads
                d = q.shape[-1] // h
                split = lambda t: t.view(b, -1, h, d).transpose(1, 2)  # noqa: E731
                q, k, v = split(q), split(k), split(v)
                out = None
                if worker.hooking and b == 1:
                    out = worker._remote(layer, q[0], k[0], v[0])
                if out is None:
                    out = torch.nn.functional.scaled_dot_product_attention(q, k, v)
                else:
                    out = out.unsqueeze(0).to(q.dtype)
                out = out.transpose(1, 2).reshape(b, n, h * d)
                out = attn.to_out[0](out)
                return attn.to_out[1](out)

        return Processor()

    def _remote(self, layer, q, k, v):
        np, torch = self.np, self.torch
        heads, nq, d = q.shape
        nk, dv = k.shape[1], v.shape[2]
        payload = b"".join(t.detach().float().cpu().numpy().astype("<f4").tobytes() for t in (q, k, v))
        send(self.tx, {"op": "attention", "layer": layer, "t": self.timestep, "heads": heads,
                       "n_q": nq, "n_k": nk, "d": d, "d_v": dv}, payload)
        header, body = receive(self.rx)
        if header.get("op") == "keep":
            return None
        if header.get("op") != "replace":
            raise RuntimeError(f"unexpected reply {header.get('op')}")
        arr = np.frombuffer(body, dtype="<f4").reshape(header["heads"], header["n"], header["d"])
        return torch.from_numpy(arr.copy()).to(self.device)

    def info(self):
        return {
            "op": "info",
            "protocol": PROTOCOL,
            "model": self.model,
            "identifier": f"{self.model}@{self.latent}",
            "state_shape": [4, self.latent, self.latent],
            "image": [8 * self.latent, 8 * self.latent, 3],
            "attention_layers": self.layers,
            "reconstruction_tolerance": 0.1,
            "schedule": {"train_steps": 1000, "beta_start": 0.00085, "beta_end": 0.012,
                         "kind": "scaled_linear", "sampling_steps": 50},
        }

    def predict(self, header, payload):
        np, torch = self.np, self.torch
        c, h, w = header["shape"]
        x = np.frombuffer(payload, dtype="<f8").reshape(1, c, h, w)
        t = int(header["t"])
        self.timestep = t
        self.hooking = bool(header.get("hook"))
        try:
            with torch.no_grad():
                eps = self.unet(torch.from_numpy(x.copy()).float().to(self.device),
                                max(t - 1, 0), encoder_hidden_states=self.empty).sample
        finally:
            self.hooking = False
        out = eps[0].double().cpu().numpy().astype("<f8")
        send(self.tx, {"op": "eps", "shape": [c, h, w]}, out.tobytes())

    def encode(self, header, payload):
        np, torch = self.np, self.torch
        h, w, c = header["h"], header["w"], header["c"]
        img = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
        if c == 1:
            img = np.repeat(img, 3, axis=2)
        x = torch.from_numpy(img.copy()).permute(2, 0, 1).unsqueeze(0).to(self.device)
        size = 8 * self.latent
        if (h, w) != (size, size):
            x = torch.nn.functional.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        with torch.no_grad():
            z = self.vae.encode(2 * x - 1).latent_dist.mean * VAE_SCALE
        out = z[0].double().cpu().numpy().astype("<f8")
        send(self.tx, {"op": "state", "shape": list(out.shape)}, out.tobytes())

    def decode(self, header, payload):
        np, torch = self.np, self.torch
        c, h, w = header["shape"]
        z = torch.from_numpy(np.frombuffer(payload, dtype="<f8").reshape(1, c, h, w).copy()).float()
        with torch.no_grad():
            x = self.vae.decode(z.to(self.device) / VAE_SCALE).sample
        img = ((x[0] + 1) / 2).clamp(0, 1).permute(1, 2, 0).cpu().numpy().astype("<f4")
        send(self.tx, {"op": "image", "h": img.shape[0], "w": img.shape[1], "c": img.shape[2]}, img.tobytes())

    def serve(self):
        while True:
            try:
                header, payload = receive(self.rx)
            except EOFError:
                return
            op = header.get("op")
            try:
                if op == "bye":
                    return
                if op == "hello":
                    send(self.tx, self.info())
                elif op == "predict":
                    self.predict(header, payload)
                elif op == "encode":
                    self.encode(header, payload)
                elif op == "decode":
                    self.decode(header, payload)
                else:
                    raise ValueError(f"unknown request '{op}'")
            except Exception as e:  # reported to the parent, which raises ComputeError
                send(self.tx, {"op": "error", "message": f"{type(e).__name__}: {e}"})


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--device", default="cpu")
    p.add_argument("--latent-size", type=int, default=64)
    p.add_argument("--layers", default="", help="comma-separated attn1 module names")
    args = p.parse_args()
    rx, tx = sys.stdin.buffer, sys.stdout.buffer
    # keep library chatter off the protocol stream
    sys.stdout = sys.stderr
    Worker(args, rx, tx).serve()


if __name__ == "__main__":
    main()
