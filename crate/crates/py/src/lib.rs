//! Python bindings. Results cross the boundary as JSON strings.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use autodalk::controller::ArmMode;
use autodalk::harness::{self, TrialConfig};
use autodalk::wire;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(toml: Option<&str>, seed: u64) -> PyResult<TrialConfig> {
    let mut cfg = match toml {
        Some(text) => TrialConfig::from_toml(text).map_err(err)?,
        None => TrialConfig::new(seed),
    };
    cfg.seed = seed;
    Ok(cfg)
}

/// Run one insertion and return the trial result as JSON.
#[pyfunction]
#[pyo3(signature = (seed, mode = "autonomous", config_toml = None))]
fn run_trial(seed: u64, mode: &str, config_toml: Option<&str>) -> PyResult<String> {
    let mut cfg = config(config_toml, seed)?;
    cfg.controller.mode = match mode {
        "autonomous" | "ar" => ArmMode::Autonomous,
        "teleop" | "tr" => ArmMode::Teleop,
        m => return Err(err(format!("unknown mode {m:?}"))),
    };
    let outcome = harness::run_trial(&cfg).map_err(err)?;
    serde_json::to_string(&outcome.result).map_err(err)
}

/// Positioning benchmark report as JSON.
#[pyfunction]
#[pyo3(signature = (seed, config_toml = None))]
fn iso_bench(seed: u64, config_toml: Option<&str>) -> PyResult<String> {
    let cfg = config(config_toml, seed)?;
    let report = harness::run_iso_bench(&cfg.kin, &cfg.iso, seed).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

/// Geometric depth below the epithelium for an optical depth.
#[pyfunction]
fn refract_correct(optical_um: f64, n_s: f64) -> PyResult<f64> {
    autodalk::dsp::refract_correct(optical_um, n_s).map_err(err)
}

/// Encode a TRACE frame; returns the wire bytes.
#[pyfunction]
fn encode_trace(seq: u32, timestamp_us: u64, epi_um: f32, dm_um: f32, needle_um: f32, validity: u8, frame_seq: u32) -> PyResult<Vec<u8>> {
    let msg = wire::TraceMsg { epi_um, dm_um, needle_um, validity, frame_seq };
    wire::encode(&wire::Frame::new(seq, timestamp_us, wire::Message::Trace(msg))).map_err(err)
}

/// Decode one frame; returns (type name, seq, bytes consumed).
#[pyfunction]
fn decode_frame(bytes: &[u8]) -> PyResult<(String, u32, usize)> {
    let (frame, used) = wire::decode(bytes).map_err(|e| err(format!("{e:?}")))?;
    let kind = match frame.message {
        wire::Message::MScan(_) => "mscan",
        wire::Message::Trace(_) => "trace",
        wire::Message::Command(_) => "command",
        wire::Message::Status(_) => "status",
    };
    Ok((kind.to_string(), frame.seq, used))
}

#[pymodule]
fn autodalk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_trial, m)?)?;
    m.add_function(wrap_pyfunction!(iso_bench, m)?)?;
    m.add_function(wrap_pyfunction!(refract_correct, m)?)?;
    m.add_function(wrap_pyfunction!(encode_trace, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    Ok(())
}
