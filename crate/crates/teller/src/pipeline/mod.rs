//! Streaming orchestration and latency accounting.
//!
//! Per 200ms chunk: embed audio → decode 32 motion tokens → dequantize and
//! decode to a 4-frame window → interpolate to 5 frames → lift to a feature
//! volume and refine. No stage ever looks at a later chunk's audio, so the
//! emitted prefix is invariant to truncating the future. Stages run either
//! inline (sequential mode) or as a chain of threads joined by bounded
//! size-1 channels (pipelined mode); both produce identical streams.
//!
//! The schedule simulator answers the real-time question as arithmetic on a
//! stage budget: a chunk is real-time iff its compute fits inside its own
//! 200ms, and one second of output costs `5 × per-chunk` compute.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ar::{self, ARParams, DecodeEvent, DecodeState, SamplerConfig};
use crate::audio::{AudioChunk, AudioEmbedding, Frontend};
use crate::error::{Error, Result};
use crate::etm::{refine, ETMParams, FeatureVolume};
use crate::motion::{interpolate_4_to_5, MotionLatent, MotionWindow};
use crate::rvq::RVQCodec;

/// Feature-volume shape a motion frame lifts to: 25 rows × 3 components.
pub const FEATURE_H: usize = 5;
pub const FEATURE_W: usize = 5;
pub const FEATURE_C: usize = 3;

pub const FRAMES_PER_CHUNK_OUT: usize = 5;

/// Real-time contract: a chunk's compute must fit in its own duration.
pub const CHUNK_MS: f64 = 200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Audio,
    Ar,
    MotionDecode,
    Interp,
    Etm,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Audio => "audio",
            Stage::Ar => "ar",
            Stage::MotionDecode => "motion_decode",
            Stage::Interp => "interp",
            Stage::Etm => "etm",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "audio" => Stage::Audio,
            "ar" => Stage::Ar,
            "motion_decode" => Stage::MotionDecode,
            "interp" => Stage::Interp,
            "etm" => Stage::Etm,
            other => return Err(Error::format(format!("unknown stage `{other}`"))),
        })
    }

    pub const ALL: [Stage; 5] = [Stage::Audio, Stage::Ar, Stage::MotionDecode, Stage::Interp, Stage::Etm];
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub chunk: usize,
    pub stage: Stage,
    pub start_ms: f64,
    pub end_ms: f64,
    pub tokens: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyTrace {
    pub rows: Vec<TraceRow>,
    /// Audio underruns observed (each also leaves a zero-output audio row).
    pub stalls: usize,
    /// Highest simultaneous occupancy seen across the bounded queues
    /// (pipelined mode only; 0 in sequential mode).
    pub peak_queue_depth: usize,
}

impl LatencyTrace {
    /// Sum of stage durations for one chunk.
    pub fn chunk_compute_ms(&self, chunk: usize) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.chunk == chunk)
            .map(|r| r.end_ms - r.start_ms)
            .sum()
    }

    pub fn chunks(&self) -> usize {
        self.rows.iter().map(|r| r.chunk + 1).max().unwrap_or(0)
    }
}

// --- schedule simulation ------------------------------------------------------

/// Per-stage time budget in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBudget {
    pub audio_encoder_ms: f64,
    pub stage1_total_ms: f64,
    pub ar_per_16_tokens_ms: f64,
    pub motion_decoder_ms: f64,
    pub stage2_total_ms: f64,
    pub vae_ms: f64,
    pub etm_ms: f64,
}

impl StageBudget {
    /// Published reference timings for the full-scale system.
    pub fn reference() -> Self {
        StageBudget {
            audio_encoder_ms: 7.0,
            stage1_total_ms: 106.0,
            ar_per_16_tokens_ms: 6.0,
            motion_decoder_ms: 10.0,
            stage2_total_ms: 71.0,
            vae_ms: 25.0,
            etm_ms: 21.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.audio_encoder_ms,
            self.stage1_total_ms,
            self.ar_per_16_tokens_ms,
            self.motion_decoder_ms,
            self.stage2_total_ms,
            self.vae_ms,
            self.etm_ms,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("budgets must be non-negative and finite"));
        }
        // component budgets may not exceed their stage totals (32 tokens = 2
        // groups of 16)
        if 2.0 * self.ar_per_16_tokens_ms + self.motion_decoder_ms > self.stage1_total_ms {
            return Err(Error::validation("stage-1 components exceed stage-1 total"));
        }
        if self.vae_ms + self.etm_ms > self.stage2_total_ms {
            return Err(Error::validation("stage-2 components exceed stage-2 total"));
        }
        Ok(())
    }

    pub fn per_chunk_ms(&self) -> f64 {
        self.audio_encoder_ms + self.stage1_total_ms + self.stage2_total_ms
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub fps: f64,
    /// Compute seconds per second of generated output.
    pub realtime_factor: f64,
    pub max_chunk_latency_ms: f64,
    pub verdict: bool,
}

impl ThroughputReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report json")
    }
}

/// Model a strictly sequential per-chunk schedule under a budget.
pub fn simulate_schedule(budget: &StageBudget, chunks: usize) -> Result<ThroughputReport> {
    if chunks == 0 {
        return Err(Error::validation("chunks must be >= 1"));
    }
    budget.validate()?;
    let per_chunk = budget.per_chunk_ms();
    Ok(ThroughputReport {
        fps: FRAMES_PER_CHUNK_OUT as f64 / 0.2,
        realtime_factor: per_chunk * FRAMES_PER_CHUNK_OUT as f64 / 1000.0,
        max_chunk_latency_ms: per_chunk,
        verdict: per_chunk <= CHUNK_MS,
    })
}

/// Throughput measured from an actual run's trace.
pub fn measured_report(trace: &LatencyTrace) -> Result<ThroughputReport> {
    let chunks = trace.chunks();
    if chunks == 0 {
        return Err(Error::validation("trace is empty"));
    }
    let mut max_ms = 0.0f64;
    let mut total_ms = 0.0f64;
    let mut frames = 0usize;
    for c in 0..chunks {
        let ms = trace.chunk_compute_ms(c);
        max_ms = max_ms.max(ms);
        total_ms += ms;
        frames += trace
            .rows
            .iter()
            .filter(|r| r.chunk == c && r.stage == Stage::Etm)
            .map(|r| r.frames)
            .sum::<usize>();
    }
    // frames / (chunks · 0.2s), arranged to stay exact for whole ratios
    Ok(ThroughputReport {
        fps: frames as f64 * (FRAMES_PER_CHUNK_OUT as f64) / (chunks as f64 * FRAMES_PER_CHUNK_OUT as f64 * 0.2),
        realtime_factor: (total_ms / chunks as f64) * FRAMES_PER_CHUNK_OUT as f64 / 1000.0,
        max_chunk_latency_ms: max_ms,
        verdict: max_ms <= CHUNK_MS,
    })
}

// --- streaming ---------------------------------------------------------------

/// What an audio source yields when polled.
pub enum AudioPull {
    Chunk(AudioChunk),
    /// Data not available yet (mid-stream underrun).
    Stall,
    End,
}

pub trait AudioSource: Send {
    fn next_chunk(&mut self) -> AudioPull;
}

/// Source over a fully buffered sample slice.
pub struct BufferedSource {
    chunks: std::vec::IntoIter<AudioChunk>,
}

impl BufferedSource {
    pub fn new(samples: &[f32], sample_rate_hz: u32) -> Result<Self> {
        Ok(BufferedSource { chunks: crate::audio::chunk_stream(samples, sample_rate_hz)?.into_iter() })
    }
}

impl AudioSource for BufferedSource {
    fn next_chunk(&mut self) -> AudioPull {
        match self.chunks.next() {
            Some(c) => AudioPull::Chunk(c),
            None => AudioPull::End,
        }
    }
}

/// Wraps a source, stalling `stalls_before_each_chunk` times before every
/// chunk. Exercises the underrun path.
pub struct StallingSource<S> {
    inner: S,
    stalls_before_each_chunk: usize,
    pending: usize,
}

impl<S: AudioSource> StallingSource<S> {
    pub fn new(inner: S, stalls_before_each_chunk: usize) -> Self {
        StallingSource { inner, stalls_before_each_chunk, pending: stalls_before_each_chunk }
    }
}

impl<S: AudioSource> AudioSource for StallingSource<S> {
    fn next_chunk(&mut self) -> AudioPull {
        if self.pending > 0 {
            self.pending -= 1;
            return AudioPull::Stall;
        }
        self.pending = self.stalls_before_each_chunk;
        self.inner.next_chunk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// One thread, stages inline. The reference for output equality.
    Sequential,
    /// One thread per stage, bounded size-1 channels between them.
    Pipelined,
}

#[derive(Debug)]
pub struct StreamOutput {
    /// Interpolated 25 Hz motion frames, 5 per chunk.
    pub motion: Vec<MotionLatent>,
    /// Refined per-chunk feature volumes `(1, 5, 5, 5, 3)`.
    pub features: Vec<FeatureVolume>,
    pub tokens: Vec<u16>,
    pub events: Vec<DecodeEvent>,
    pub trace: LatencyTrace,
}

/// Lift motion frames into a `(1, t, 5, 5, 3)` feature volume (row-major
/// frame cells).
pub fn motion_to_volume(frames: &[MotionLatent]) -> FeatureVolume {
    let mut out = FeatureVolume::zeros(1, frames.len(), FEATURE_H, FEATURE_W, FEATURE_C);
    for (ti, f) in frames.iter().enumerate() {
        let flat = f.flatten();
        for hi in 0..FEATURE_H {
            for wi in 0..FEATURE_W {
                for ci in 0..FEATURE_C {
                    out.set(0, ti, hi, wi, ci, flat[(hi * FEATURE_W + wi) * 3 + ci]);
                }
            }
        }
    }
    out
}

/// Blocking FIFO with a hard capacity and an exact occupancy high-water
/// mark. Backs the pipelined mode's inter-stage hand-off.
struct BoundedQueue<T> {
    state: Mutex<QueueState<T>>,
    not_full: Condvar,
    not_empty: Condvar,
    cap: usize,
}

struct QueueState<T> {
    buf: VecDeque<T>,
    closed: bool,
    peak: usize,
}

impl<T> BoundedQueue<T> {
    fn new(cap: usize) -> Self {
        BoundedQueue {
            state: Mutex::new(QueueState { buf: VecDeque::new(), closed: false, peak: 0 }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
            cap: cap.max(1),
        }
    }

    /// Blocks while full; fails only if the consumer side closed.
    fn push(&self, item: T) -> std::result::Result<(), ()> {
        let mut st = self.state.lock().expect("queue poisoned");
        while st.buf.len() >= self.cap && !st.closed {
            st = self.not_full.wait(st).expect("queue poisoned");
        }
        if st.closed {
            return Err(());
        }
        st.buf.push_back(item);
        let len = st.buf.len();
        if len > st.peak {
            st.peak = len;
        }
        drop(st);
        self.not_empty.notify_one();
        Ok(())
    }

    /// Blocks while empty; `None` once closed and drained.
    fn pop(&self) -> Option<T> {
        let mut st = self.state.lock().expect("queue poisoned");
        loop {
            if let Some(item) = st.buf.pop_front() {
                drop(st);
                self.not_full.notify_one();
                return Some(item);
            }
            if st.closed {
                return None;
            }
            st = self.not_empty.wait(st).expect("queue poisoned");
        }
    }

    fn close(&self) {
        let mut st = self.state.lock().expect("queue poisoned");
        st.closed = true;
        drop(st);
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }

    fn peak(&self) -> usize {
        self.state.lock().expect("queue poisoned").peak
    }
}

pub struct Pipeline<'a> {
    codec: &'a RVQCodec,
    ar: &'a ARParams,
    etm: Option<&'a ETMParams>,
    frontend: Frontend,
    sampler: SamplerConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        codec: &'a RVQCodec,
        ar: &'a ARParams,
        etm: Option<&'a ETMParams>,
        frontend: Frontend,
        sampler: SamplerConfig,
    ) -> Result<Self> {
        if codec.config.codebook_size != ar.config.vocab {
            return Err(Error::mismatch(format!(
                "codec codebook size {} vs model vocab {}",
                codec.config.codebook_size, ar.config.vocab
            )));
        }
        if codec.config.tokens_per_window != ar.config.tokens_per_chunk {
            return Err(Error::mismatch(format!(
                "codec emits {} tokens per window, model consumes {}",
                codec.config.tokens_per_window, ar.config.tokens_per_chunk
            )));
        }
        if codec.config.window_frames != 4 {
            return Err(Error::mismatch(
                "streaming interpolation requires 4-frame codec windows".to_string(),
            ));
        }
        if frontend.config().dim != ar.config.audio_dim {
            return Err(Error::mismatch(format!(
                "frontend dim {} vs model audio_dim {}",
                frontend.config().dim,
                ar.config.audio_dim
            )));
        }
        if let Some(etm) = etm {
            if etm.config.channels != FEATURE_C {
                return Err(Error::mismatch(format!(
                    "refiner expects {} channels, feature lift provides {FEATURE_C}",
                    etm.config.channels
                )));
            }
            if etm.config.t_max < FRAMES_PER_CHUNK_OUT {
                return Err(Error::mismatch(
                    "refiner position table shorter than 5 frames".to_string(),
                ));
            }
        }
        Ok(Pipeline { codec, ar, etm, frontend, sampler })
    }

    pub fn run(&self, source: impl AudioSource, mode: RunMode) -> Result<StreamOutput> {
        match mode {
            RunMode::Sequential => self.run_sequential(source),
            RunMode::Pipelined => self.run_pipelined(source),
        }
    }

    fn run_sequential(&self, mut source: impl AudioSource) -> Result<StreamOutput> {
        let start = Instant::now();
        let ms = |i: Instant| i.duration_since(start).as_secs_f64() * 1000.0;
        let mut out = StreamOutput {
            motion: Vec::new(),
            features: Vec::new(),
            tokens: Vec::new(),
            events: Vec::new(),
            trace: LatencyTrace::default(),
        };
        let mut state = DecodeState::new(self.ar, self.sampler);
        let mut chunk_index = 0usize;
        loop {
            match source.next_chunk() {
                AudioPull::End => break,
                AudioPull::Stall => {
                    let t = ms(Instant::now());
                    out.trace.rows.push(TraceRow {
                        chunk: chunk_index,
                        stage: Stage::Audio,
                        start_ms: t,
                        end_ms: t,
                        tokens: 0,
                        frames: 0,
                    });
                    out.trace.stalls += 1;
                    continue;
                }
                AudioPull::Chunk(chunk) => {
                    let t0 = Instant::now();
                    let emb = self.frontend.embed_chunk(&chunk)?;
                    let t1 = Instant::now();
                    let tokens = ar::decode_chunk(self.ar, &mut state, &emb)?;
                    let t2 = Instant::now();
                    let z_hat = self.codec.dequantize_window(&tokens)?;
                    let window = self.codec.decode(&z_hat)?;
                    let t3 = Instant::now();
                    let five = interpolate_4_to_5(&window)?;
                    let t4 = Instant::now();
                    let volume = motion_to_volume(&five.frames);
                    let refined = match self.etm {
                        Some(etm) => refine(etm, &volume)?,
                        None => volume,
                    };
                    let t5 = Instant::now();

                    push_chunk_rows(
                        &mut out.trace,
                        chunk_index,
                        [ms(t0), ms(t1), ms(t2), ms(t3), ms(t4), ms(t5)],
                        tokens.len(),
                        window.frames.len(),
                    );
                    out.tokens.extend_from_slice(&tokens);
                    out.motion.extend(five.frames.iter().cloned());
                    out.features.push(refined);
                    chunk_index += 1;
                }
            }
        }
        out.events = state.events;
        Ok(out)
    }

    fn run_pipelined(&self, mut source: impl AudioSource) -> Result<StreamOutput> {
        let start = Instant::now();
        let ms = move |i: Instant| i.duration_since(start).as_secs_f64() * 1000.0;
        type StageResult<T> = std::result::Result<T, Error>;

        let q_ab = BoundedQueue::<(usize, AudioEmbedding)>::new(1);
        let q_bc = BoundedQueue::<(usize, Vec<u16>)>::new(1);
        let q_cd = BoundedQueue::<(usize, MotionWindow)>::new(1);
        let q_de = BoundedQueue::<(usize, MotionWindow)>::new(1);

        let result: Result<StreamOutput> = std::thread::scope(|scope| {
            // stage A: pull audio, embed
            let frontend = &self.frontend;
            let (q_ab_tx, q_ab_rx) = (&q_ab, &q_ab);
            let a = scope.spawn(move || -> StageResult<(Vec<TraceRow>, usize)> {
                let mut rows = Vec::new();
                let mut stalls = 0usize;
                let mut chunk = 0usize;
                loop {
                    match source.next_chunk() {
                        AudioPull::End => break,
                        AudioPull::Stall => {
                            let t = ms(Instant::now());
                            rows.push(TraceRow {
                                chunk,
                                stage: Stage::Audio,
                                start_ms: t,
                                end_ms: t,
                                tokens: 0,
                                frames: 0,
                            });
                            stalls += 1;
                            continue;
                        }
                        AudioPull::Chunk(c) => {
                            let t0 = Instant::now();
                            let emb = frontend.embed_chunk(&c)?;
                            let t1 = Instant::now();
                            rows.push(TraceRow {
                                chunk,
                                stage: Stage::Audio,
                                start_ms: ms(t0),
                                end_ms: ms(t1),
                                tokens: 0,
                                frames: 0,
                            });
                            if q_ab_tx.push((chunk, emb)).is_err() {
                                break;
                            }
                            chunk += 1;
                        }
                    }
                }
                q_ab_tx.close();
                Ok((rows, stalls))
            });

            // stage B: autoregressive token decode (owns the decode state)
            let ar_params = self.ar;
            let sampler = self.sampler;
            let (q_bc_tx, q_bc_rx) = (&q_bc, &q_bc);
            let b = scope.spawn(move || -> StageResult<(Vec<TraceRow>, Vec<DecodeEvent>)> {
                let mut rows = Vec::new();
                let mut state = DecodeState::new(ar_params, sampler);
                while let Some((chunk, emb)) = q_ab_rx.pop() {
                    let t0 = Instant::now();
                    let tokens = ar::decode_chunk(ar_params, &mut state, &emb)?;
                    let t1 = Instant::now();
                    rows.push(TraceRow {
                        chunk,
                        stage: Stage::Ar,
                        start_ms: ms(t0),
                        end_ms: ms(t1),
                        tokens: tokens.len(),
                        frames: 0,
                    });
                    if q_bc_tx.push((chunk, tokens)).is_err() {
                        break;
                    }
                }
                q_bc_tx.close();
                Ok((rows, state.events))
            });

            // stage C: dequantize + decode to a 4-frame window
            let codec = self.codec;
            let (q_cd_tx, q_cd_rx) = (&q_cd, &q_cd);
            let c = scope.spawn(move || -> StageResult<(Vec<TraceRow>, Vec<u16>)> {
                let mut rows = Vec::new();
                let mut all_tokens = Vec::new();
                while let Some((chunk, tokens)) = q_bc_rx.pop() {
                    let t0 = Instant::now();
                    let z_hat = codec.dequantize_window(&tokens)?;
                    let window = codec.decode(&z_hat)?;
                    let t1 = Instant::now();
                    rows.push(TraceRow {
                        chunk,
                        stage: Stage::MotionDecode,
                        start_ms: ms(t0),
                        end_ms: ms(t1),
                        tokens: 0,
                        frames: window.frames.len(),
                    });
                    all_tokens.extend_from_slice(&tokens);
                    if q_cd_tx.push((chunk, window)).is_err() {
                        break;
                    }
                }
                q_cd_tx.close();
                Ok((rows, all_tokens))
            });

            // stage D: 4 → 5 interpolation
            let (q_de_tx, q_de_rx) = (&q_de, &q_de);
            let d = scope.spawn(move || -> StageResult<Vec<TraceRow>> {
                let mut rows = Vec::new();
                while let Some((chunk, window)) = q_cd_rx.pop() {
                    let t0 = Instant::now();
                    let five = interpolate_4_to_5(&window)?;
                    let t1 = Instant::now();
                    rows.push(TraceRow {
                        chunk,
                        stage: Stage::Interp,
                        start_ms: ms(t0),
                        end_ms: ms(t1),
                        tokens: 0,
                        frames: five.frames.len(),
                    });
                    if q_de_tx.push((chunk, five)).is_err() {
                        break;
                    }
                }
                q_de_tx.close();
                Ok(rows)
            });

            // stage E (this thread): lift + refine, collect outputs
            let mut rows_e = Vec::new();
            let mut motion = Vec::new();
            let mut features = Vec::new();
            while let Some((chunk, five)) = q_de_rx.pop() {
                let t0 = Instant::now();
                let volume = motion_to_volume(&five.frames);
                let refined = match self.etm {
                    Some(etm) => refine(etm, &volume)?,
                    None => volume,
                };
                let t1 = Instant::now();
                rows_e.push(TraceRow {
                    chunk,
                    stage: Stage::Etm,
                    start_ms: ms(t0),
                    end_ms: ms(t1),
                    tokens: 0,
                    frames: five.frames.len(),
                });
                motion.extend(five.frames.iter().cloned());
                features.push(refined);
            }

            let (rows_a, stalls) = a.join().expect("audio stage panicked")?;
            let (rows_b, events) = b.join().expect("decode stage panicked")?;
            let (rows_c, tokens) = c.join().expect("motion stage panicked")?;
            let rows_d = d.join().expect("interp stage panicked")?;

            let mut rows = rows_a;
            rows.extend(rows_b);
            rows.extend(rows_c);
            rows.extend(rows_d);
            rows.extend(rows_e);
            rows.sort_by(|x, y| (x.chunk, x.stage).cmp(&(y.chunk, y.stage)));

            let peak = [q_ab.peak(), q_bc.peak(), q_cd.peak(), q_de.peak()]
                .into_iter()
                .max()
                .unwrap_or(0);
            Ok(StreamOutput {
                motion,
                features,
                tokens,
                events,
                trace: LatencyTrace { rows, stalls, peak_queue_depth: peak },
            })
        });
        result
    }
}

fn push_chunk_rows(
    trace: &mut LatencyTrace,
    chunk: usize,
    bounds: [f64; 6],
    tokens: usize,
    decoded_frames: usize,
) {
    let stages = [
        (Stage::Audio, 0usize, 0usize),
        (Stage::Ar, tokens, 0),
        (Stage::MotionDecode, 0, decoded_frames),
        (Stage::Interp, 0, FRAMES_PER_CHUNK_OUT),
        (Stage::Etm, 0, FRAMES_PER_CHUNK_OUT),
    ];
    for (i, (stage, toks, frames)) in stages.into_iter().enumerate() {
        trace.rows.push(TraceRow {
            chunk,
            stage,
            start_ms: bounds[i],
            end_ms: bounds[i + 1],
            tokens: toks,
            frames,
        });
    }
}

// --- refined-feature dump --------------------------------------------------------

const FEATURES_MAGIC: &[u8; 4] = b"TFTR";
const FEATURES_VERSION: u16 = 1;

/// Dump per-chunk feature volumes: header, count, then per volume its
/// `(t, h, w, c)` dims and f32 LE data (batch is always 1).
pub fn save_features(path: impl AsRef<Path>, features: &[FeatureVolume]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    crate::io::write_magic(&mut w, FEATURES_MAGIC)?;
    crate::io::write_u16(&mut w, FEATURES_VERSION)?;
    crate::io::write_u32(&mut w, features.len() as u32)?;
    for f in features {
        if f.b != 1 {
            return Err(Error::validation("feature dump expects single-batch volumes"));
        }
        for dim in [f.t, f.h, f.w, f.c] {
            crate::io::write_u32(&mut w, dim as u32)?;
        }
        crate::io::write_f32_slice(&mut w, f.data())?;
    }
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<FeatureVolume>> {
    let mut r = BufReader::new(File::open(path)?);
    crate::io::expect_magic(&mut r, FEATURES_MAGIC)?;
    let version = crate::io::read_u16(&mut r)?;
    crate::io::check_version(version, FEATURES_VERSION, "feature dump")?;
    let count = crate::io::read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let t = crate::io::read_u32(&mut r)? as usize;
        let h = crate::io::read_u32(&mut r)? as usize;
        let w = crate::io::read_u32(&mut r)? as usize;
        let c = crate::io::read_u32(&mut r)? as usize;
        let data = crate::io::read_f32_vec(&mut r, t * h * w * c)?;
        out.push(FeatureVolume::from_vec(1, t, h, w, c, data)?);
    }
    Ok(out)
}

// --- trace CSV -----------------------------------------------------------------

/// `chunk,stage,start_ms,end_ms,tokens,frames` rows; floats print in
/// shortest round-trip form so import is lossless.
pub fn export_trace(trace: &LatencyTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "chunk,stage,start_ms,end_ms,tokens,frames")?;
    for r in &trace.rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.chunk,
            r.stage.name(),
            r.start_ms,
            r.end_ms,
            r.tokens,
            r.frames
        )?;
    }
    Ok(())
}

pub fn import_trace(path: impl AsRef<Path>) -> Result<LatencyTrace> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty trace file".to_string()))??;
    if header.trim() != "chunk,stage,start_ms,end_ms,tokens,frames" {
        return Err(Error::format(format!("unexpected trace header `{header}`")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::format(format!("bad trace row `{line}`")));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format(format!("bad float `{s}` in trace")))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::format(format!("bad integer `{s}` in trace")))
        };
        rows.push(TraceRow {
            chunk: parse_u(parts[0])?,
            stage: Stage::from_name(parts[1])?,
            start_ms: parse_f(parts[2])?,
            end_ms: parse_f(parts[3])?,
            tokens: parse_u(parts[4])?,
            frames: parse_u(parts[5])?,
        });
    }
    let stalls = rows
        .iter()
        .filter(|r| r.stage == Stage::Audio && r.start_ms == r.end_ms && r.tokens == 0 && r.frames == 0)
        .count();
    Ok(LatencyTrace { rows, stalls, peak_queue_depth: 0 })
}
