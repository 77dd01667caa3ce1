//! Export of a trained classifier to a self-describing JSON inference graph.
//!
//! The graph is a flat op list (`conv2d`, `batch_norm`, `relu`, `max_pool`,
//! `residual`, `global_avg_pool`, `linear`, `sigmoid`) with weights embedded
//! as base64 little-endian f32, so an inference-only runtime can execute a
//! checkpoint without this crate.

use super::backbone::{Backbone, Bottleneck, ConvBnRelu};
use super::{BranchModel, InputNorm, ModelError};
use crate::nn::{BatchNorm2d, Conv2d, Linear};
use serde_json::{json, Value};

fn b64_f32(values: impl Iterator<Item = f32>) -> String {
    // Standard base64 alphabet, no padding dependency beyond '='.
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(TABLE[(n >> 18) as usize & 63] as char);
        out.push(TABLE[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 { TABLE[(n >> 6) as usize & 63] as char } else { '=' });
        out.push(if chunk.len() > 2 { TABLE[n as usize & 63] as char } else { '=' });
    }
    out
}

fn tensor_json(shape: &[usize], values: impl Iterator<Item = f32>) -> Value {
    json!({ "shape": shape, "data": b64_f32(values) })
}

fn conv_json(conv: &Conv2d) -> Value {
    json!({
        "op": "conv2d",
        "stride": conv.stride,
        "pad": conv.pad,
        "weight": tensor_json(conv.weight.value.shape(), conv.weight.value.iter().copied()),
        "bias": tensor_json(conv.bias.value.shape(), conv.bias.value.iter().copied()),
    })
}

fn bn_json(bn: &BatchNorm2d) -> Value {
    json!({
        "op": "batch_norm",
        "eps": bn.eps,
        "gamma": tensor_json(bn.gamma.value.shape(), bn.gamma.value.iter().copied()),
        "beta": tensor_json(bn.beta.value.shape(), bn.beta.value.iter().copied()),
        "running_mean": tensor_json(&[bn.running_mean.len()], bn.running_mean.iter().copied()),
        "running_var": tensor_json(&[bn.running_var.len()], bn.running_var.iter().copied()),
    })
}

fn linear_json(linear: &Linear) -> Value {
    json!({
        "op": "linear",
        "weight": tensor_json(linear.weight.value.shape(), linear.weight.value.iter().copied()),
        "bias": tensor_json(linear.bias.value.shape(), linear.bias.value.iter().copied()),
    })
}

fn conv_bn_relu_ops(block: &ConvBnRelu, ops: &mut Vec<Value>) {
    ops.push(conv_json(&block.conv));
    ops.push(bn_json(&block.bn));
    ops.push(json!({ "op": "relu" }));
}

fn bottleneck_json(block: &Bottleneck) -> Value {
    let mut main = vec![
        conv_json(&block.conv1),
        bn_json(&block.bn1),
        json!({ "op": "relu" }),
        conv_json(&block.conv2),
        bn_json(&block.bn2),
        json!({ "op": "relu" }),
        conv_json(&block.conv3),
        bn_json(&block.bn3),
    ];
    let shortcut: Vec<Value> = match &block.projection {
        Some((conv, bn)) => vec![conv_json(conv), bn_json(bn)],
        None => Vec::new(),
    };
    main.shrink_to_fit();
    json!({ "op": "residual", "main": main, "shortcut": shortcut, "activation": "relu" })
}

fn backbone_ops(backbone: &Backbone) -> Vec<Value> {
    let mut ops = Vec::new();
    match backbone {
        Backbone::Tiny(b) => {
            for stage in &b.stages {
                conv_bn_relu_ops(stage, &mut ops);
            }
        }
        Backbone::ResNet50(b) => {
            conv_bn_relu_ops(&b.stem, &mut ops);
            ops.push(json!({
                "op": "max_pool",
                "kernel": b.pool.kernel,
                "stride": b.pool.stride,
                "pad": b.pool.pad,
            }));
            for block in &b.blocks {
                ops.push(bottleneck_json(block));
            }
        }
    }
    ops
}

/// Serializes a branch classifier to the portable inference-graph JSON.
pub fn export_inference_graph(model: &BranchModel) -> Result<String, ModelError> {
    let norm = InputNorm::for_backbone(&model.config.backbone);
    let mut ops = backbone_ops(&model.backbone);
    ops.push(json!({ "op": "global_avg_pool" }));
    ops.push(linear_json(&model.head));
    ops.push(json!({ "op": "sigmoid" }));
    let graph = json!({
        "format": "aigvdet-inference-graph",
        "version": 1,
        "model": "branch",
        "backbone": model.config.backbone,
        "modality": model.config.source,
        "input": {
            "size": model.config.input_size,
            "enforce_size": model.config.enforce_input_size,
            "mean": norm.mean,
            "std": norm.std,
        },
        "ops": ops,
    });
    serde_json::to_string_pretty(&graph).map_err(|e| ModelError::Checkpoint(e.to_string()))
}
