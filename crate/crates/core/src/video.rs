//! Video container I/O backed by the system FFmpeg libraries, plus a
//! lossless PNG-directory clip format for fixtures and synthetic corpora.
//!
//! A "video" path is either a regular file (decoded through libavformat:
//! MP4, GIF, anything the system build supports) or a directory holding
//! `frame_<i>.png` files, which decodes losslessly and deterministically.

use ffmpeg_next as ffmpeg;
use image::RgbImage;
use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("ffmpeg: {0}")]
    Ffmpeg(#[from] ffmpeg::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no video stream in {0}")]
    NoVideoStream(String),
    #[error("decode failure in {path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("encoder '{0}' unavailable in this FFmpeg build")]
    EncoderUnavailable(String),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("empty frame directory {0}")]
    EmptyDirectory(String),
    #[error("cannot encode an empty frame list")]
    NoFrames,
    #[error("crf out of range [0, 51]: {0}")]
    CrfOutOfRange(i32),
}

fn init() {
    static INIT: OnceLock<()> = OnceLock::new();
    INIT.get_or_init(|| {
        ffmpeg::init().expect("ffmpeg init");
        // Keep encoder/decoder chatter out of program output.
        ffmpeg::util::log::set_level(ffmpeg::util::log::Level::Error);
    });
}

/// Basic stream properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoInfo {
    pub width: u32,
    pub height: u32,
    pub frame_count: usize,
}

/// Frames decoded for a set of requested indices.
#[derive(Debug)]
pub struct DecodedFrames {
    pub frames: Vec<RgbImage>,
    /// True if some requested indices were beyond the end of the stream.
    pub clamped: bool,
}

fn is_frame_dir(path: &Path) -> bool {
    path.is_dir()
}

fn dir_frame_indices(path: &Path) -> Result<Vec<usize>, VideoError> {
    let mut indices = Vec::new();
    for entry in std::fs::read_dir(path)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".png")) {
            if let Ok(i) = stem.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    if indices.is_empty() {
        return Err(VideoError::EmptyDirectory(path.display().to_string()));
    }
    indices.sort_unstable();
    Ok(indices)
}

/// Reports dimensions and frame count without decoding pixel data.
pub fn probe(path: &Path) -> Result<VideoInfo, VideoError> {
    if is_frame_dir(path) {
        let indices = dir_frame_indices(path)?;
        let first = image::open(path.join(format!("frame_{}.png", indices[0])))?.to_rgb8();
        return Ok(VideoInfo {
            width: first.width(),
            height: first.height(),
            frame_count: indices.len(),
        });
    }
    init();
    let mut ictx = ffmpeg::format::input(&path)?;
    let stream = ictx
        .streams()
        .best(ffmpeg::media::Type::Video)
        .ok_or_else(|| VideoError::NoVideoStream(path.display().to_string()))?;
    let stream_index = stream.index();
    let params = stream.parameters();
    let decoder = ffmpeg::codec::context::Context::from_parameters(params)?.decoder().video()?;
    let (width, height) = (decoder.width(), decoder.height());
    let reported = stream.frames();
    let frame_count = if reported > 0 {
        reported as usize
    } else {
        // Containers like GIF do not report a count; count packets instead.
        let mut n = 0usize;
        for (s, _) in ictx.packets() {
            if s.index() == stream_index {
                n += 1;
            }
        }
        n
    };
    Ok(VideoInfo { width, height, frame_count })
}

/// Decodes the frames at the given indices (presentation order, 0-based).
///
/// Indices beyond the end of the stream are dropped and flagged via
/// [`DecodedFrames::clamped`]. Frames come back as 8-bit RGB regardless of
/// the source pixel format; GIF palettes are expanded.
pub fn decode_frames(path: &Path, indices: &[usize]) -> Result<DecodedFrames, VideoError> {
    let wanted: BTreeSet<usize> = indices.iter().copied().collect();
    let Some(&max_wanted) = wanted.iter().next_back() else {
        return Ok(DecodedFrames { frames: Vec::new(), clamped: false });
    };
    if is_frame_dir(path) {
        let available = dir_frame_indices(path)?;
        let mut frames = Vec::new();
        let mut clamped = false;
        for &i in &wanted {
            if i < available.len() {
                frames.push(image::open(path.join(format!("frame_{}.png", available[i])))?.to_rgb8());
            } else {
                clamped = true;
            }
        }
        return Ok(DecodedFrames { frames, clamped });
    }

    init();
    let decode_err = |msg: String| VideoError::Decode { path: path.display().to_string(), msg };
    let mut ictx = ffmpeg::format::input(&path)?;
    let stream = ictx
        .streams()
        .best(ffmpeg::media::Type::Video)
        .ok_or_else(|| VideoError::NoVideoStream(path.display().to_string()))?;
    let stream_index = stream.index();
    let mut decoder =
        ffmpeg::codec::context::Context::from_parameters(stream.parameters())?.decoder().video()?;

    let mut scaler: Option<ffmpeg::software::scaling::Context> = None;
    let mut frames = Vec::with_capacity(wanted.len());
    let mut counter = 0usize;
    let mut decoded = ffmpeg::frame::Video::empty();

    let take = |decoded: &ffmpeg::frame::Video,
                    scaler: &mut Option<ffmpeg::software::scaling::Context>,
                    counter: &mut usize,
                    frames: &mut Vec<RgbImage>|
     -> Result<bool, VideoError> {
        if wanted.contains(counter) {
            let sc = match scaler {
                Some(sc) => sc,
                None => {
                    *scaler = Some(ffmpeg::software::scaling::Context::get(
                        decoded.format(),
                        decoded.width(),
                        decoded.height(),
                        ffmpeg::format::Pixel::RGB24,
                        decoded.width(),
                        decoded.height(),
                        ffmpeg::software::scaling::Flags::BILINEAR,
                    )?);
                    scaler.as_mut().unwrap()
                }
            };
            let mut rgb = ffmpeg::frame::Video::empty();
            sc.run(decoded, &mut rgb)?;
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let stride = rgb.stride(0);
            let data = rgb.data(0);
            let mut buf = Vec::with_capacity(w * h * 3);
            for y in 0..h {
                buf.extend_from_slice(&data[y * stride..y * stride + w * 3]);
            }
            frames.push(
                RgbImage::from_raw(w as u32, h as u32, buf).expect("rgb buffer sized to frame"),
            );
        }
        *counter += 1;
        Ok(*counter > max_wanted)
    };

    let mut done = false;
    for (s, packet) in ictx.packets() {
        if s.index() != stream_index {
            continue;
        }
        decoder.send_packet(&packet).map_err(|e| decode_err(format!("send packet: {e}")))?;
        while decoder.receive_frame(&mut decoded).is_ok() {
            if take(&decoded, &mut scaler, &mut counter, &mut frames)? {
                done = true;
                break;
            }
        }
        if done {
            break;
        }
    }
    if !done {
        decoder.send_eof().ok();
        while decoder.receive_frame(&mut decoded).is_ok() {
            if take(&decoded, &mut scaler, &mut counter, &mut frames)? {
                break;
            }
        }
    }
    if frames.is_empty() {
        return Err(decode_err("no frames decoded".into()));
    }
    Ok(DecodedFrames { clamped: frames.len() < wanted.len(), frames })
}

/// H.264 encoding settings. CRF 0 is reserved by callers for passthrough
/// copies; this encoder is only invoked with crf in [1, 51].
#[derive(Debug, Clone)]
pub struct H264Settings {
    pub crf: u8,
    pub preset: String,
    pub fps: i32,
}

impl Default for H264Settings {
    fn default() -> Self {
        Self { crf: 18, preset: "veryfast".into(), fps: 10 }
    }
}

/// Encodes RGB frames to an MP4 file with libx264 at a constant rate factor.
///
/// Dimensions are rounded down to even values (4:2:0 chroma). Single-threaded
/// x264 so output bytes are reproducible run to run.
pub fn encode_h264(path: &Path, frames: &[RgbImage], settings: &H264Settings) -> Result<(), VideoError> {
    if frames.is_empty() {
        return Err(VideoError::NoFrames);
    }
    init();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (w, h) = (frames[0].width() & !1, frames[0].height() & !1);
    let codec = ffmpeg::encoder::find_by_name("libx264")
        .ok_or_else(|| VideoError::EncoderUnavailable("libx264".into()))?;

    let mut octx = ffmpeg::format::output(&path)?;
    let global_header =
        octx.format().flags().contains(ffmpeg::format::flag::Flags::GLOBAL_HEADER);
    let mut ost = octx.add_stream(codec)?;
    // Allocate the context from the codec so x264's own defaults apply.
    let ctx = unsafe {
        let raw = ffmpeg::ffi::avcodec_alloc_context3(codec.as_ptr());
        ffmpeg::codec::context::Context::wrap(raw, None)
    };
    let mut enc = ctx.encoder().video()?;
    enc.set_width(w);
    enc.set_height(h);
    enc.set_format(ffmpeg::format::Pixel::YUV420P);
    enc.set_time_base(ffmpeg::Rational(1, settings.fps));
    enc.set_frame_rate(Some(ffmpeg::Rational(settings.fps, 1)));
    enc.set_max_b_frames(0);
    if global_header {
        enc.set_flags(ffmpeg::codec::flag::Flags::GLOBAL_HEADER);
    }
    let mut opts = ffmpeg::Dictionary::new();
    opts.set("crf", &settings.crf.to_string());
    opts.set("preset", &settings.preset);
    opts.set("threads", "1");
    let mut enc = enc.open_as_with(codec, opts)?;
    ost.set_parameters(&enc);
    ost.set_time_base(ffmpeg::Rational(1, settings.fps));
    octx.write_header()?;
    let ost_tb = octx.stream(0).expect("stream 0 exists").time_base();

    let mut scaler = ffmpeg::software::scaling::Context::get(
        ffmpeg::format::Pixel::RGB24,
        frames[0].width(),
        frames[0].height(),
        ffmpeg::format::Pixel::YUV420P,
        w,
        h,
        ffmpeg::software::scaling::Flags::BILINEAR,
    )?;

    let flush = |enc: &mut ffmpeg::encoder::video::Encoder,
                     octx: &mut ffmpeg::format::context::Output|
     -> Result<(), VideoError> {
        let mut packet = ffmpeg::Packet::empty();
        while enc.receive_packet(&mut packet).is_ok() {
            // Without a duration the muxer ends the track at the last pts and
            // demuxers discard the final sample as outside the edit list.
            packet.set_duration(1);
            packet.rescale_ts(ffmpeg::Rational(1, settings.fps), ost_tb);
            packet.set_stream(0);
            packet.write_interleaved(octx)?;
        }
        Ok(())
    };

    for (i, frame) in frames.iter().enumerate() {
        let mut src = ffmpeg::frame::Video::new(ffmpeg::format::Pixel::RGB24, frame.width(), frame.height());
        {
            let stride = src.stride(0);
            let data = src.data_mut(0);
            let raw = frame.as_raw();
            let row = frame.width() as usize * 3;
            for y in 0..frame.height() as usize {
                data[y * stride..y * stride + row].copy_from_slice(&raw[y * row..(y + 1) * row]);
            }
        }
        let mut yuv = ffmpeg::frame::Video::empty();
        scaler.run(&src, &mut yuv)?;
        yuv.set_pts(Some(i as i64));
        enc.send_frame(&yuv)?;
        flush(&mut enc, &mut octx)?;
    }
    enc.send_eof()?;
    flush(&mut enc, &mut octx)?;
    octx.write_trailer()?;
    Ok(())
}

/// Writes frames as a PNG directory clip (`frame_<i>.png`).
pub fn write_frame_dir(path: &Path, frames: &[RgbImage]) -> Result<(), VideoError> {
    if frames.is_empty() {
        return Err(VideoError::NoFrames);
    }
    std::fs::create_dir_all(path)?;
    for (i, frame) in frames.iter().enumerate() {
        frame.save(path.join(format!("frame_{i}.png")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured_frame(w: u32, h: u32, shift: i64) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let xx = x as i64 + shift;
            let v = ((xx * 7 + y as i64 * 13) % 251) as u8;
            image::Rgb([v, v.wrapping_add(40), v.wrapping_add(90)])
        })
    }

    #[test]
    fn h264_roundtrip_preserves_frame_count_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.mp4");
        let frames: Vec<RgbImage> = (0..10).map(|i| textured_frame(64, 48, i * 2)).collect();
        encode_h264(&path, &frames, &H264Settings::default()).unwrap();

        let info = probe(&path).unwrap();
        assert_eq!(info.width, 64);
        assert_eq!(info.height, 48);
        assert_eq!(info.frame_count, 10);

        let decoded = decode_frames(&path, &[0, 5, 9]).unwrap();
        assert_eq!(decoded.frames.len(), 3);
        assert!(!decoded.clamped);
        assert_eq!(decoded.frames[0].dimensions(), (64, 48));
    }

    #[test]
    fn decode_clamps_out_of_range_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.mp4");
        let frames: Vec<RgbImage> = (0..5).map(|i| textured_frame(32, 32, i)).collect();
        encode_h264(&path, &frames, &H264Settings::default()).unwrap();
        let decoded = decode_frames(&path, &[0, 3, 99]).unwrap();
        assert_eq!(decoded.frames.len(), 2);
        assert!(decoded.clamped);
    }

    #[test]
    fn gif_decodes_to_rgb() {
        use image::codecs::gif::GifEncoder;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.gif");
        {
            let file = std::fs::File::create(&path).unwrap();
            let mut enc = GifEncoder::new(file);
            for i in 0..4 {
                let rgba = image::RgbaImage::from_fn(32, 24, |x, y| {
                    let v = ((x + y + i * 5) % 255) as u8;
                    image::Rgba([v, 255 - v, v / 2, 255])
                });
                enc.encode_frame(image::Frame::new(rgba)).unwrap();
            }
        }
        let info = probe(&path).unwrap();
        assert_eq!(info.frame_count, 4);
        let decoded = decode_frames(&path, &[0, 1, 2, 3]).unwrap();
        assert_eq!(decoded.frames.len(), 4);
        assert_eq!(decoded.frames[0].dimensions(), (32, 24));
    }

    #[test]
    fn corrupt_file_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.mp4");
        std::fs::write(&path, b"this is not a video at all").unwrap();
        assert!(decode_frames(&path, &[0]).is_err());
    }

    #[test]
    fn frame_dir_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip");
        let frames: Vec<RgbImage> = (0..6).map(|i| textured_frame(20, 14, i)).collect();
        write_frame_dir(&path, &frames).unwrap();
        let info = probe(&path).unwrap();
        assert_eq!(info.frame_count, 6);
        let decoded = decode_frames(&path, &[2, 4]).unwrap();
        assert_eq!(decoded.frames[0], frames[2]);
        assert_eq!(decoded.frames[1], frames[4]);
    }

    #[test]
    fn higher_crf_strictly_shrinks_files() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<RgbImage> = (0..12).map(|i| textured_frame(96, 64, i * 3)).collect();
        let mut sizes = Vec::new();
        for crf in [18u8, 23, 28] {
            let path = dir.path().join(format!("c{crf}.mp4"));
            encode_h264(&path, &frames, &H264Settings { crf, ..Default::default() }).unwrap();
            sizes.push(std::fs::metadata(&path).unwrap().len());
        }
        assert!(sizes[0] > sizes[1] && sizes[1] > sizes[2], "sizes: {sizes:?}");
    }
}
