use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use acom::coding::{
    build_smoothed_huffman, decode_payload, decode_stream, encode_stream, Bitstream, CodeHistogram, CodingMode,
    RateReport, STREAM_MAGIC,
};
use acom::config::RunConfig;
use acom::model::{
    accuracy, finetune_quantized, greedy_decode, load_model, mac_count, model_hash, save_model, train_continuous,
    Checkpoint, DeviceOutput, LayerSpec, SplitModel, Target, Task,
};
use acom::pipeline::{
    run_cloud_session, run_device_session, simulate, DeviceOptions, TcpTransport, TransportKind,
};
use acom::rvq::{Codebook, TokenFrame};
use acom::{Error, FeatureSequence, Result};

use crate::text::{format_features, format_tokens, hex, parse_features, parse_tokens};
use crate::{Command, ConfigSource, DataSplit, TransportArg};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Config { task } => {
            print!("{}", RunConfig::new(task.into()).to_toml());
            Ok(())
        }
        Command::Train { source, out } => train(&load_config(&source)?, &out),
        Command::Finetune {
            source,
            model,
            out,
            split,
            codebooks,
            size,
            steps,
        } => {
            let mut cfg = load_config(&source)?;
            if let Some(s) = steps {
                cfg.finetune_steps = s;
            }
            finetune(&cfg, &model, &out, &split, &codebooks, &size)
        }
        Command::Sample {
            source,
            index,
            from,
            out,
        } => sample(&load_config(&source)?, index, from, &out),
        Command::Encode {
            codebook,
            model,
            input,
            tokens,
            frame_rate,
            huffman,
            out,
        } => encode(&codebook, model.as_deref(), input.as_deref(), tokens.as_deref(), frame_rate, huffman, &out),
        Command::Decode {
            codebook,
            input,
            tokens,
            out,
        } => decode(&codebook, &input, tokens, out.as_deref()),
        Command::Stats {
            input,
            size,
            frame_rate,
        } => stats(&input, size, frame_rate),
        Command::Simulate {
            model,
            codebook,
            input,
            transport,
            listen,
            connect,
            huffman,
            batch,
            timeout_ms,
        } => {
            let opts = SimulateOptions {
                huffman,
                batch,
                timeout: Duration::from_millis(timeout_ms),
            };
            let ckpt = open_model(&model)?;
            let cb = open_codebook(&codebook)?;
            match (listen, connect, input) {
                (Some(addr), _, _) => serve(&ckpt.model, &cb, &addr, &opts),
                (None, Some(addr), Some(input)) => connect_device(&ckpt.model, &cb, &input, &addr, &opts),
                (None, None, Some(input)) => simulate_local(&ckpt.model, &cb, &input, transport, &opts),
                (None, _, None) => Err(Error::Config("--input is required".into())),
            }
        }
        Command::Macs {
            model,
            config,
            task,
            split,
            sweep,
            codebooks,
            size,
        } => macs(model.as_deref(), config, task, split, sweep, codebooks, size),
    }
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    with_path(path, std::fs::read(path).map_err(Error::from))
}

fn read_text(path: &Path) -> Result<String> {
    with_path(path, std::fs::read_to_string(path).map_err(Error::from))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    with_path(path, std::fs::write(path, bytes).map_err(Error::from))
}

fn load_config(source: &ConfigSource) -> Result<RunConfig> {
    let cfg = match (&source.config, source.task) {
        (Some(path), _) => with_path(path, RunConfig::load(path))?,
        (None, Some(task)) => RunConfig::new(task.into()),
        (None, None) => return Err(Error::Config("either --config or --task is required".into())),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn open_model(path: &Path) -> Result<Checkpoint> {
    with_path(path, load_model(path))
}

fn open_codebook(path: &Path) -> Result<Codebook<f32>> {
    let file = with_path(path, File::open(path).map_err(Error::from))?;
    with_path(path, Codebook::read_from(BufReader::new(file)))
}

fn save_codebook(cb: &Codebook<f32>, path: &Path) -> Result<()> {
    let file = with_path(path, File::create(path).map_err(Error::from))?;
    let mut w = BufWriter::new(file);
    with_path(path, cb.write_to(&mut w))?;
    with_path(path, w.flush().map_err(Error::from))
}

fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut model = cfg.build_model()?;
    let (train, test) = cfg.datasets()?;
    let history = train_continuous(&mut model, &train, &cfg.loss_weights(), &cfg.train_options())?;
    let acc = accuracy(&model, None, &test)?;
    save_model(&model, &cfg.loss_weights(), out)?;
    println!(
        "steps={} loss={:.6} accuracy={:.4} model_hash={:016x}",
        history.losses.len(),
        tail_mean(&history.losses),
        acc,
        model_hash(&model)
    );
    Ok(())
}

/// Mean of the last 100 losses.
fn tail_mean(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len().saturating_sub(100)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn check_architecture(cfg: &RunConfig, model: &SplitModel<f32>) -> Result<()> {
    if cfg.task != model.task()
        || cfg.input_dim() != model.input_dim()
        || cfg.input_rate() != model.input_rate()
        || cfg.layer_specs()? != model.specs()
    {
        return Err(Error::Config("configuration does not describe the checkpoint's architecture".into()));
    }
    Ok(())
}

fn tokens_of(model: &SplitModel<f32>, cb: &Codebook<f32>, input: &FeatureSequence<f32>) -> Result<Vec<TokenFrame>> {
    match model.forward_device_with(input, Some(cb))? {
        DeviceOutput::Tokens(t) => Ok(t),
        DeviceOutput::Features(_) => unreachable!("a codebook was supplied"),
    }
}

struct SweepRow {
    split: usize,
    stages: usize,
    size: usize,
    loss: f64,
    accuracy: f64,
    raw_bps: f64,
    entropy_bps: f64,
    device_macs: u64,
}

fn finetune(
    cfg: &RunConfig,
    base_path: &Path,
    out: &Path,
    splits: &[usize],
    stages: &[usize],
    sizes: &[usize],
) -> Result<()> {
    let base = open_model(base_path)?;
    check_architecture(cfg, &base.model)?;
    let splits = if splits.is_empty() { vec![base.model.split()] } else { splits.to_vec() };
    let stages = if stages.is_empty() { vec![cfg.codebooks] } else { stages.to_vec() };
    let sizes = if sizes.is_empty() { vec![cfg.codebook_size] } else { sizes.to_vec() };
    let mut combos = Vec::new();
    for &m in &splits {
        for &k in &stages {
            for &v in &sizes {
                combos.push((m, k, v));
            }
        }
    }
    with_path(out, std::fs::create_dir_all(out).map_err(Error::from))?;
    let (train, test) = cfg.datasets()?;
    let weights = cfg.loss_weights();
    let specs = base.model.specs();

    let mut rows = Vec::with_capacity(combos.len());
    for &(m, k, v) in &combos {
        let mut run_cfg = cfg.clone();
        run_cfg.split_layer = Some(m);
        run_cfg.codebooks = k;
        run_cfg.codebook_size = v;
        run_cfg.validate()?;
        let mut model = base.model.clone().with_split(m)?;
        let mut cb = run_cfg.build_codebook(&model)?;
        let history = finetune_quantized(&mut model, &mut cb, &train, &weights, &run_cfg.finetune_options())?;

        let mut hist = CodeHistogram::new(k, v);
        for s in &test {
            hist.accumulate(&tokens_of(&model, &cb, &s.input)?)?;
        }
        let rate = RateReport::from_histogram(model.frame_rate(), &hist)?;
        let dir = if combos.len() == 1 { out.to_path_buf() } else { out.join(format!("m{m}-k{k}-v{v}")) };
        with_path(&dir, std::fs::create_dir_all(&dir).map_err(Error::from))?;
        save_model(&model, &weights, &dir.join("model.toml"))?;
        save_codebook(&cb, &dir.join("codebook.acbk"))?;
        rows.push(SweepRow {
            split: m,
            stages: k,
            size: v,
            loss: tail_mean(&history.losses),
            accuracy: accuracy(&model, Some(&cb), &test)?,
            raw_bps: rate.raw_bps,
            entropy_bps: rate.entropy_bps,
            device_macs: mac_count(&specs, model.input_dim(), model.input_rate(), m, k, v)?.device_total,
        });
    }
    print!("{}", sweep_table(&rows));
    Ok(())
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>3} {:>3} {:>6} {:>10} {:>9} {:>10} {:>12} {:>12}\n",
        "M", "K", "V", "loss", "accuracy", "raw_bps", "entropy_bps", "device_macs"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>3} {:>3} {:>6} {:>10.4} {:>9.4} {:>10.2} {:>12.2} {:>12}",
            r.split, r.stages, r.size, r.loss, r.accuracy, r.raw_bps, r.entropy_bps, r.device_macs
        );
    }
    s
}

fn sample(cfg: &RunConfig, index: usize, from: DataSplit, out: &Path) -> Result<()> {
    let mut cfg = cfg.clone();
    match from {
        DataSplit::Train => cfg.data.test_samples = 0,
        DataSplit::Test => cfg.data.train_samples = 0,
    }
    let (train, test) = cfg.datasets()?;
    let set = match from {
        DataSplit::Train => train,
        DataSplit::Test => test,
    };
    let s = set
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("sample index {index} out of range ({} samples)", set.len())))?;
    write(out, format_features(&s.input).as_bytes())?;
    match &s.target {
        Target::Class(c) => println!("frames={} class={c}", s.input.len()),
        Target::Sequence { labels, .. } => println!("frames={} labels={}", s.input.len(), join(labels)),
    }
    Ok(())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn encode(
    codebook: &Path,
    model: Option<&Path>,
    input: Option<&Path>,
    tokens: Option<&Path>,
    frame_rate: Option<f64>,
    huffman: bool,
    out: &Path,
) -> Result<()> {
    let cb = open_codebook(codebook)?;
    let (tokens, rate) = match (tokens, model, input) {
        (Some(path), model, _) => {
            let (header, tokens) = parse_tokens(&read_text(path)?)?;
            let rate = match (frame_rate, header.frame_rate, model) {
                (Some(r), _, _) | (None, Some(r), _) => r,
                (None, None, Some(m)) => open_model(m)?.model.frame_rate(),
                _ => return Err(Error::Config("a frame rate is required for this token dump".into())),
            };
            (tokens, rate)
        }
        (None, Some(model), Some(input)) => {
            let model = open_model(model)?.model;
            let x = parse_features(&read_text(input)?)?;
            (tokens_of(&model, &cb, &x)?, model.frame_rate())
        }
        _ => return Err(Error::Config("encode needs --tokens, or --model with --input".into())),
    };
    let mode = if huffman { CodingMode::Huffman } else { CodingMode::Raw };
    let bytes = encode_stream(&tokens, &cb, rate, mode)?.to_bytes();
    write(out, &bytes)?;
    println!("frames={} bytes={} codebook_hash={:016x}", tokens.len(), bytes.len(), cb.hash());
    Ok(())
}

fn decode(codebook: &Path, input: &Path, as_tokens: bool, out: Option<&Path>) -> Result<()> {
    let cb = open_codebook(codebook)?;
    let (header, tokens) = decode_stream(&read(input)?, &cb)?;
    let text = if as_tokens {
        format_tokens(&tokens, cb.stages(), cb.size(), header.frame_rate())
    } else {
        format_features(&cb.dequantize_sequence(&tokens)?)
    };
    match out {
        Some(path) => write(path, text.as_bytes()),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(stdout.flush()?)
        }
    }
}

fn stats(input: &Path, size: Option<usize>, frame_rate: Option<f64>) -> Result<()> {
    let bytes = read(input)?;
    let (tokens, stages, size, rate) = if bytes.starts_with(STREAM_MAGIC) {
        let stream = Bitstream::from_bytes(&bytes)?;
        let h = stream.header.clone();
        (decode_payload(&stream)?, h.stages as usize, h.size as usize, h.frame_rate())
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::InvalidArgument(format!("{}: neither a bitstream nor a token dump", input.display())))?;
        let (header, tokens) = parse_tokens(&text)?;
        let size = size
            .or(header.size)
            .ok_or_else(|| Error::Config("codebook size unknown; pass --size".into()))?;
        let rate = frame_rate
            .or(header.frame_rate)
            .ok_or_else(|| Error::Config("frame rate unknown; pass --frame-rate".into()))?;
        let stages = header.stages.or(tokens.first().map(TokenFrame::stages)).unwrap_or(1);
        (tokens, stages, size, rate)
    };
    let hist = CodeHistogram::from_tokens(stages, size, &tokens)?;
    println!("{}", RateReport::from_histogram(rate, &hist)?.to_stats_line());
    Ok(())
}

struct SimulateOptions {
    huffman: bool,
    batch: Option<usize>,
    timeout: Duration,
}

fn device_options(
    model: &SplitModel<f32>,
    cb: &Codebook<f32>,
    input: &FeatureSequence<f32>,
    opts: &SimulateOptions,
) -> Result<DeviceOptions> {
    if opts.batch == Some(0) {
        return Err(Error::Config("--batch must be positive".into()));
    }
    let tables = if opts.huffman {
        let hist = CodeHistogram::from_tokens(cb.stages(), cb.size(), &tokens_of(model, cb, input)?)?;
        Some(
            (0..cb.stages())
                .map(|k| build_smoothed_huffman(hist.stage_counts(k)))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(DeviceOptions {
        tables,
        batch: opts.batch,
    })
}

fn prediction_line(model: &SplitModel<f32>, result: &[f32]) -> Result<String> {
    if result.is_empty() {
        return Ok("prediction=none".into());
    }
    let y = FeatureSequence::from_vec(model.output_dim(), result.to_vec())?;
    Ok(match model.task() {
        Task::Classification => format!("prediction={}", SplitModel::<f32>::argmax(y.frame(0))),
        Task::Sequence => format!("prediction={}", join(&greedy_decode(&y))),
    })
}

fn result_lines(model: &SplitModel<f32>, result: &[f32]) -> Result<String> {
    let bytes: Vec<u8> = result.iter().flat_map(|v| v.to_le_bytes()).collect();
    Ok(format!("{}\nresult_bytes={}", prediction_line(model, result)?, hex(&bytes)))
}

fn simulate_local(
    model: &SplitModel<f32>,
    cb: &Codebook<f32>,
    input: &Path,
    transport: TransportArg,
    opts: &SimulateOptions,
) -> Result<()> {
    let x = parse_features(&read_text(input)?)?;
    let kind = match transport {
        TransportArg::Loopback => TransportKind::Loopback,
        TransportArg::Tcp => TransportKind::LocalTcp,
    };
    let options = device_options(model, cb, &x, opts)?;
    let (device, _) = simulate(&x, model, cb, kind, &options, opts.timeout)?;
    println!(
        "frames={} wire_bytes={} payload_bytes={}",
        device.frames_sent, device.wire_bytes, device.payload_bytes
    );
    println!("{}", result_lines(model, &device.result)?);
    Ok(())
}

fn serve(model: &SplitModel<f32>, cb: &Codebook<f32>, addr: &str, opts: &SimulateOptions) -> Result<()> {
    let listener = TcpListener::bind(addr)?;
    println!("listening={}", listener.local_addr()?);
    io::stdout().flush()?;
    let (stream, _) = listener.accept()?;
    let mut t = TcpTransport::from_tcp(stream, opts.timeout)?;
    let report = run_cloud_session(&mut t, model, cb)?;
    println!("frames={}", report.tokens.len());
    println!("{}", result_lines(model, &report.result())?);
    Ok(())
}

fn connect_device(
    model: &SplitModel<f32>,
    cb: &Codebook<f32>,
    input: &Path,
    addr: &str,
    opts: &SimulateOptions,
) -> Result<()> {
    let x = parse_features(&read_text(input)?)?;
    let options = device_options(model, cb, &x, opts)?;
    let mut t = TcpTransport::connect(addr, opts.timeout)?;
    let device = run_device_session(&x, model, cb, &mut t, &options)?;
    println!(
        "frames={} wire_bytes={} payload_bytes={}",
        device.frames_sent, device.wire_bytes, device.payload_bytes
    );
    println!("{}", result_lines(model, &device.result)?);
    Ok(())
}

fn macs(
    model: Option<&Path>,
    config: Option<PathBuf>,
    task: Option<crate::TaskArg>,
    split: Option<usize>,
    sweep: bool,
    stages: Option<usize>,
    size: Option<usize>,
) -> Result<()> {
    let (specs, input_dim, input_rate, default_split, cfg): (Vec<LayerSpec>, usize, f64, usize, Option<RunConfig>) =
        match model {
            Some(path) => {
                let m = open_model(path)?.model;
                (m.specs(), m.input_dim(), m.input_rate(), m.split(), None)
            }
            None => {
                let cfg = load_config(&ConfigSource { config, task })?;
                (cfg.layer_specs()?, cfg.input_dim(), cfg.input_rate(), cfg.split_layer(), Some(cfg))
            }
        };
    let defaults = cfg.unwrap_or_else(|| RunConfig::new(Task::Classification));
    let stages = stages.unwrap_or(defaults.codebooks);
    let size = size.unwrap_or(defaults.codebook_size);
    let splits: Vec<usize> = if sweep { (1..=specs.len()).collect() } else { vec![split.unwrap_or(default_split)] };
    for m in splits {
        let r = mac_count(&specs, input_dim, input_rate, m, stages, size)?;
        println!(
            "split={} device_macs={} quantizer_macs={} cloud_macs={} per_layer={}",
            r.split,
            r.device_total,
            r.quantizer_total,
            r.cloud_total,
            join(&r.per_layer)
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_mean_uses_last_hundred() {
        let losses: Vec<f64> = (0..200).map(|i| if i < 100 { 10.0 } else { 1.0 }).collect();
        assert_eq!(tail_mean(&losses), 1.0);
        assert_eq!(tail_mean(&[2.0, 4.0]), 3.0);
        assert!(tail_mean(&[]).is_nan());
    }

    #[test]
    fn io_errors_name_the_path() {
        let e = read(Path::new("/nonexistent/acom/file")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/acom/file"));
        assert_eq!(e.class(), acom::ErrorClass::Io);
    }

    #[test]
    fn sweep_table_has_header_and_rows() {
        let row = SweepRow {
            split: 3,
            stages: 2,
            size: 64,
            loss: 0.5,
            accuracy: 0.9,
            raw_bps: 480.0,
            entropy_bps: 400.123,
            device_macs: 1234,
        };
        let t = sweep_table(&[row]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].split_whitespace().eq(
            ["M", "K", "V", "loss", "accuracy", "raw_bps", "entropy_bps", "device_macs"].into_iter()
        ));
        assert!(lines[1].split_whitespace().eq(
            ["3", "2", "64", "0.5000", "0.9000", "480.00", "400.12", "1234"].into_iter()
        ));
    }
}
