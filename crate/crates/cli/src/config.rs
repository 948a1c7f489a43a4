//! Plain-text architecture files: one `key = value` per line, `#` starts a
//! comment. Recognized keys:
//!
//!   in_channels = <n>
//!   layer = <kernel> <dilation> <out_channels> [bias] [bn] [dropout] [elu|softmax|none]
//!
//! Layers appear in network order; the class count is the last layer's
//! channel count. Unknown keys are errors, not warnings, so typos fail fast.

use dilseg_core::network::{Activation, LayerSpec, NetworkConfig};

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub problem: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config line {}: {}", self.line, self.problem)
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, problem: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        problem: problem.into(),
    }
}

fn parse_layer(line_no: usize, value: &str) -> Result<LayerSpec, ConfigError> {
    let tokens: Vec<&str> = value.split_whitespace().collect();
    if tokens.len() < 3 {
        return Err(err(
            line_no,
            "layer needs at least kernel, dilation and out_channels",
        ));
    }
    let number = |what: &str, token: &str| -> Result<usize, ConfigError> {
        token
            .parse::<usize>()
            .map_err(|_| err(line_no, format!("{what} is not a number: {token:?}")))
    };
    let kernel = number("kernel", tokens[0])?;
    let dilation = number("dilation", tokens[1])?;
    let out_channels = number("out_channels", tokens[2])?;
    if kernel != 1 && kernel != 3 {
        return Err(err(line_no, format!("kernel must be 1 or 3, got {kernel}")));
    }
    if dilation == 0 {
        return Err(err(line_no, "dilation must be positive"));
    }
    if out_channels == 0 {
        return Err(err(line_no, "out_channels must be positive"));
    }

    let mut spec = LayerSpec {
        kernel,
        dilation,
        out_channels,
        bias: false,
        batchnorm: false,
        dropout: false,
        activation: Activation::None,
    };
    let mut activation_set = false;
    for &token in &tokens[3..] {
        match token {
            "bias" => spec.bias = true,
            "bn" => spec.batchnorm = true,
            "dropout" => spec.dropout = true,
            "elu" | "softmax" | "none" => {
                if activation_set {
                    return Err(err(line_no, "multiple activations on one layer"));
                }
                activation_set = true;
                spec.activation = match token {
                    "elu" => Activation::Elu,
                    "softmax" => Activation::Softmax,
                    _ => Activation::None,
                };
            }
            other => {
                return Err(err(line_no, format!("unknown layer attribute {other:?}")));
            }
        }
    }
    if spec.bias && spec.batchnorm {
        return Err(err(line_no, "bn layers fold bias into beta; drop 'bias'"));
    }
    Ok(spec)
}

pub fn parse_config(text: &str) -> Result<NetworkConfig, ConfigError> {
    let mut in_channels = 1usize;
    let mut layers = Vec::new();
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        last_line = line_no;
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(line_no, "expected key = value"));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "in_channels" => {
                in_channels = value
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| {
                        err(line_no, format!("in_channels must be positive: {value:?}"))
                    })?;
            }
            "layer" => layers.push(parse_layer(line_no, value)?),
            other => return Err(err(line_no, format!("unknown key {other:?}"))),
        }
    }

    if layers.is_empty() {
        return Err(err(last_line.max(1), "no layers defined"));
    }
    let num_classes = layers.last().unwrap().out_channels;
    let config = NetworkConfig {
        in_channels,
        layers,
        num_classes,
    };
    config
        .validate()
        .map_err(|e| err(last_line, e.to_string()))?;
    Ok(config)
}
