//! Decoded frames in host memory.

/// A decoded image: interleaved channels, one `u16` word per sample.
///
/// Samples hold `bit_depth` significant bits; 10-bit camera data is kept
/// unpacked in 16-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub bit_depth: u8,
    pub data: Vec<u16>,
}

impl Frame {
    pub fn new(width: u32, height: u32, channels: u8, bit_depth: u8) -> Self {
        let len = width as usize * height as usize * channels as usize;
        Frame {
            width,
            height,
            channels,
            bit_depth,
            data: vec![0; len],
        }
    }

    /// A frame filled with a single value.
    pub fn constant(width: u32, height: u32, channels: u8, bit_depth: u8, value: u16) -> Self {
        let mut frame = Frame::new(width, height, channels, bit_depth);
        frame.data.fill(value);
        frame
    }

    /// Samples per row.
    pub fn row_len(&self) -> usize {
        self.width as usize * self.channels as usize
    }

    /// Row stride in bytes of the 16-bit storage.
    pub fn stride_bytes(&self) -> u32 {
        self.width * self.channels as u32 * 2
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * 2
    }

    pub fn max_value(&self) -> u16 {
        max_sample(self.bit_depth)
    }

    pub fn row(&self, y: u32) -> &[u16] {
        let len = self.row_len();
        let start = y as usize * len;
        &self.data[start..start + len]
    }

    pub fn get(&self, x: u32, y: u32, channel: u8) -> u16 {
        self.data[(y as usize * self.width as usize + x as usize) * self.channels as usize
            + channel as usize]
    }

    /// The samples as little-endian bytes, as they appear in a bus slot.
    pub fn as_bytes(&self) -> &[u8] {
        bytemuck::cast_slice(&self.data)
    }
}

pub fn max_sample(bit_depth: u8) -> u16 {
    if bit_depth >= 16 {
        u16::MAX
    } else {
        (1u16 << bit_depth) - 1
    }
}
