//! JPEG-2000 (JP2 container) through OpenJPEG. Encoding goes through the raw
//! bindings because the safe wrapper only decodes from memory.

use std::ffi::{c_char, c_void, CStr};
use std::ptr::NonNull;

use image::RgbImage;
use kdlic::{Error, Result};
use openjpeg_sys as opj;

/// Encoder settings. `rate == 0` keeps the library defaults (reversible 5/3
/// wavelet, one lossless layer).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jp2Options {
    /// Target compression ratio relative to raw 24-bit RGB.
    pub rate: f32,
    pub irreversible: bool,
}

struct Sink {
    buf: Vec<u8>,
    pos: usize,
}

impl Sink {
    fn ensure(&mut self, end: usize) {
        if self.buf.len() < end {
            self.buf.resize(end, 0);
        }
    }
}

unsafe extern "C" fn sink_write(data: *mut c_void, n: usize, user: *mut c_void) -> usize {
    let sink = &mut *(user as *mut Sink);
    let end = sink.pos + n;
    sink.ensure(end);
    let src = std::slice::from_raw_parts(data as *const u8, n);
    sink.buf[sink.pos..end].copy_from_slice(src);
    sink.pos = end;
    n
}

unsafe extern "C" fn sink_skip(n: i64, user: *mut c_void) -> i64 {
    let sink = &mut *(user as *mut Sink);
    let Some(pos) = sink.pos.checked_add_signed(n as isize) else {
        return -1;
    };
    sink.ensure(pos);
    sink.pos = pos;
    n
}

unsafe extern "C" fn sink_seek(n: i64, user: *mut c_void) -> i32 {
    let sink = &mut *(user as *mut Sink);
    if n < 0 {
        return 0;
    }
    sink.ensure(n as usize);
    sink.pos = n as usize;
    1
}

unsafe extern "C" fn collect_message(msg: *const c_char, user: *mut c_void) {
    let messages = &mut *(user as *mut Vec<String>);
    if !msg.is_null() {
        messages.push(CStr::from_ptr(msg).to_string_lossy().trim().to_string());
    }
}

/// Owns the OpenJPEG handles for one encode and frees them in reverse order.
struct Session {
    image: NonNull<opj::opj_image_t>,
    codec: Option<NonNull<c_void>>,
    stream: Option<NonNull<c_void>>,
}

impl Drop for Session {
    fn drop(&mut self) {
        unsafe {
            if let Some(s) = self.stream {
                opj::opj_stream_destroy(s.as_ptr() as *mut _);
            }
            if let Some(c) = self.codec {
                opj::opj_destroy_codec(c.as_ptr() as *mut _);
            }
            opj::opj_image_destroy(self.image.as_ptr());
        }
    }
}

fn failure(what: &str, messages: &[String]) -> Error {
    Error::Capability(format!("jpeg2000: {what} failed: {}", messages.join("; ")))
}

/// Number of wavelet levels the image can hold, capped at the library default.
fn resolutions(width: u32, height: u32, default: i32) -> i32 {
    let side = width.min(height).max(1);
    let mut n = default.max(1);
    while n > 1 && (1u32 << (n - 1)) > side {
        n -= 1;
    }
    n
}

pub fn encode(rgb: &RgbImage, options: Jp2Options) -> Result<Vec<u8>> {
    let (w, h) = rgb.dimensions();
    let mut comps = [opj::opj_image_cmptparm_t { dx: 1, dy: 1, w, h, x0: 0, y0: 0, prec: 8, bpp: 8, sgnd: 0 }; 3];
    let mut messages: Vec<String> = Vec::new();
    let mut sink = Sink { buf: Vec::new(), pos: 0 };
    unsafe {
        let image = opj::opj_image_create(3, comps.as_mut_ptr(), opj::COLOR_SPACE::OPJ_CLRSPC_SRGB);
        let image = NonNull::new(image).ok_or_else(|| failure("image allocation", &messages))?;
        let mut session = Session { image, codec: None, stream: None };
        let img = &mut *image.as_ptr();
        img.x1 = w;
        img.y1 = h;
        let planes = std::slice::from_raw_parts_mut(img.comps, 3);
        for (c, plane) in planes.iter_mut().enumerate() {
            let data = std::slice::from_raw_parts_mut(plane.data, (w * h) as usize);
            for (i, px) in rgb.pixels().enumerate() {
                data[i] = px[c] as i32;
            }
        }

        let mut params: opj::opj_cparameters_t = std::mem::zeroed();
        opj::opj_set_default_encoder_parameters(&mut params);
        params.tcp_numlayers = 1;
        params.tcp_rates[0] = options.rate;
        params.cp_disto_alloc = 1;
        params.irreversible = options.irreversible as i32;
        params.tcp_mct = 1;
        params.numresolution = resolutions(w, h, params.numresolution);

        let codec = opj::opj_create_compress(opj::CODEC_FORMAT::OPJ_CODEC_JP2);
        let codec = NonNull::new(codec as *mut c_void).ok_or_else(|| failure("codec creation", &messages))?;
        session.codec = Some(codec);
        let user = &mut messages as *mut Vec<String> as *mut c_void;
        opj::opj_set_error_handler(codec.as_ptr() as *mut _, Some(collect_message), user);
        if opj::opj_setup_encoder(codec.as_ptr() as *mut _, &mut params, image.as_ptr()) == 0 {
            return Err(failure("encoder setup", &messages));
        }

        let stream = opj::opj_stream_create(1 << 16, 0);
        let stream = NonNull::new(stream as *mut c_void).ok_or_else(|| failure("stream creation", &messages))?;
        session.stream = Some(stream);
        let s = stream.as_ptr() as *mut _;
        opj::opj_stream_set_write_function(s, Some(sink_write));
        opj::opj_stream_set_skip_function(s, Some(sink_skip));
        opj::opj_stream_set_seek_function(s, Some(sink_seek));
        opj::opj_stream_set_user_data(s, &mut sink as *mut Sink as *mut c_void, None);

        let c = codec.as_ptr() as *mut _;
        let ok = opj::opj_start_compress(c, image.as_ptr(), s) != 0
            && opj::opj_encode(c, s) != 0
            && opj::opj_end_compress(c, s) != 0;
        // release the handles before the sink is read
        drop(session);
        if !ok {
            return Err(failure("encoding", &messages));
        }
    }
    Ok(sink.buf)
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    let err = |e: jpeg2k::error::Error| Error::Capability(format!("jpeg2000: decoding failed: {e}"));
    let image = jpeg2k::Image::from_bytes(bytes).map_err(err)?;
    let data = image.get_pixels(None).map_err(err)?;
    match data.data {
        jpeg2k::ImagePixelData::Rgb8(v) => RgbImage::from_raw(data.width, data.height, v)
            .ok_or_else(|| Error::Shape("jpeg2000: decoded buffer does not match its size".into())),
        _ => Err(Error::Shape(format!("jpeg2000: expected 8-bit RGB, decoded {:?}", data.format))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_levels_fit_the_image() {
        assert_eq!(resolutions(768, 512, 6), 6);
        assert_eq!(resolutions(16, 40, 6), 5);
        assert_eq!(resolutions(1, 1, 6), 1);
    }
}
