//! Interleaved text/image token streams and the hybrid attention mask.

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const BOI: u32 = 2;
pub const EOI: u32 = 3;
/// Caption placeholder used for the unconditional branch of guidance.
pub const NULL: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Token {
    Text(u32),
    Patch(Vec<f32>),
}

impl Token {
    pub fn modality(&self) -> Modality {
        match self {
            Token::Text(_) => Modality::Text,
            Token::Patch(_) => Modality::Image,
        }
    }

    pub fn text_id(&self) -> Option<u32> {
        match self {
            Token::Text(id) => Some(*id),
            Token::Patch(_) => None,
        }
    }
}

/// A contiguous run of image patches sharing one noise level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageSegment {
    pub start: usize,
    pub len: usize,
    pub t: usize,
}

impl ImageSegment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Sequence of text ids and image-latent patches. Image segments are
/// derived from the token layout: every maximal run of patches is one
/// segment.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    tokens: Vec<Token>,
    segments: Vec<ImageSegment>,
}

/// Builder-style construction of a stream.
#[derive(Clone, Debug, Default)]
pub struct StreamBuilder {
    tokens: Vec<Token>,
    segments: Vec<ImageSegment>,
}

impl StreamBuilder {
    pub fn text(mut self, id: u32) -> Self {
        self.tokens.push(Token::Text(id));
        self
    }

    pub fn texts(mut self, ids: &[u32]) -> Self {
        self.tokens.extend(ids.iter().map(|&i| Token::Text(i)));
        self
    }

    /// Appends `BOI`, the patches, and `EOI`.
    pub fn image(mut self, patches: Vec<Vec<f32>>, t: usize) -> Self {
        self.tokens.push(Token::Text(BOI));
        let start = self.tokens.len();
        let len = patches.len();
        self.tokens.extend(patches.into_iter().map(Token::Patch));
        self.segments.push(ImageSegment { start, len, t });
        self.tokens.push(Token::Text(EOI));
        self
    }

    /// Appends raw patches without brackets; the caller is responsible for
    /// placing `BOI` and `EOI`.
    pub fn raw_patches(mut self, patches: Vec<Vec<f32>>, t: usize) -> Self {
        let start = self.tokens.len();
        let len = patches.len();
        self.tokens.extend(patches.into_iter().map(Token::Patch));
        self.segments.push(ImageSegment { start, len, t });
        self
    }

    pub fn build(self) -> TokenStream {
        TokenStream {
            tokens: self.tokens,
            segments: self.segments,
        }
    }
}

impl TokenStream {
    pub fn builder() -> StreamBuilder {
        StreamBuilder::default()
    }

    /// Builds a stream from tokens, deriving segments from patch runs.
    pub fn from_tokens(tokens: Vec<Token>, t_per_segment: &[usize]) -> Result<Self> {
        let mut segments = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            if matches!(tokens[i], Token::Patch(_)) {
                let start = i;
                while i < tokens.len() && matches!(tokens[i], Token::Patch(_)) {
                    i += 1;
                }
                let t = *t_per_segment.get(segments.len()).ok_or_else(|| {
                    Error::InvalidStream("missing noise level for image segment".into())
                })?;
                segments.push(ImageSegment {
                    start,
                    len: i - start,
                    t,
                });
            } else {
                i += 1;
            }
        }
        if segments.len() != t_per_segment.len() {
            return Err(Error::InvalidStream(format!(
                "{} noise levels for {} segments",
                t_per_segment.len(),
                segments.len()
            )));
        }
        Ok(TokenStream { tokens, segments })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &Token {
        &self.tokens[i]
    }

    pub fn segments(&self) -> &[ImageSegment] {
        &self.segments
    }

    pub fn segment_of(&self, pos: usize) -> Option<usize> {
        self.segments.iter().position(|s| s.range().contains(&pos))
    }

    pub fn modality(&self, pos: usize) -> Modality {
        self.tokens[pos].modality()
    }

    pub fn n_text(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, Token::Text(_)))
            .count()
    }

    pub fn text_ids(&self) -> Vec<u32> {
        self.tokens.iter().filter_map(Token::text_id).collect()
    }

    pub fn set_noise_level(&mut self, segment: usize, t: usize) {
        self.segments[segment].t = t;
    }

    /// Flattened patches of one segment, row-major by patch.
    pub fn segment_latent(&self, segment: usize) -> Vec<f32> {
        self.tokens[self.segments[segment].range()]
            .iter()
            .flat_map(|t| match t {
                Token::Patch(p) => p.clone(),
                Token::Text(_) => unreachable!("segments only hold patches"),
            })
            .collect()
    }

    /// Replaces the patches of one segment from a flat latent.
    pub fn set_segment_latent(&mut self, segment: usize, latent: &[f32]) {
        let seg = self.segments[segment];
        let patch_len = latent.len() / seg.len;
        for (k, pos) in seg.range().enumerate() {
            self.tokens[pos] = Token::Patch(latent[k * patch_len..(k + 1) * patch_len].to_vec());
        }
    }

    /// Appends a text token.
    pub fn push_text(&mut self, id: u32) {
        self.tokens.push(Token::Text(id));
    }

    /// Checks layout invariants against the model geometry.
    pub fn validate(&self, vocab: usize, patches_per_image: usize, patch_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidStream(m));
        if self.tokens.is_empty() {
            return bad("empty stream".into());
        }
        for tok in &self.tokens {
            match tok {
                Token::Text(id) if *id as usize >= vocab => {
                    return Err(Error::TokenOutOfVocab { id: *id, vocab })
                }
                Token::Patch(p) if p.len() != patch_dim => {
                    return bad(format!("patch of length {} (expected {patch_dim})", p.len()))
                }
                _ => {}
            }
        }
        let mut covered = 0;
        for (k, s) in self.segments.iter().enumerate() {
            if s.len != patches_per_image {
                return bad(format!(
                    "segment {k} has {} patches (expected {patches_per_image})",
                    s.len
                ));
            }
            if self.tokens[s.range()].iter().any(|t| !matches!(t, Token::Patch(_))) {
                return bad(format!("segment {k} is not contiguous"));
            }
            if s.start == 0 || self.tokens[s.start - 1] != Token::Text(BOI) {
                return bad(format!("segment {k} is not preceded by BOI"));
            }
            if self.tokens.get(s.start + s.len) != Some(&Token::Text(EOI)) {
                return bad(format!("segment {k} is not followed by EOI"));
            }
            covered += s.len;
        }
        let patches = self.tokens.len() - self.n_text();
        if covered != patches {
            return bad("patch outside any segment".into());
        }
        Ok(())
    }
}

/// Boolean visibility matrix: `allowed(q, k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n + key]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Causal visibility everywhere, plus full visibility inside each image
/// segment.
pub fn build_mask(stream: &TokenStream) -> AttentionMask {
    let n = stream.len();
    let mut seg = vec![None; n];
    for (k, s) in stream.segments().iter().enumerate() {
        for p in s.range() {
            seg[p] = Some(k);
        }
    }
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            allowed[q * n + k] = k <= q || (seg[k].is_some() && seg[k] == seg[q]);
        }
    }
    AttentionMask { n, allowed }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patches(n: usize, dim: usize) -> Vec<Vec<f32>> {
        (0..n).map(|i| vec![i as f32; dim]).collect()
    }

    #[test]
    fn pure_text_mask_is_causal() {
        let s = TokenStream::builder().texts(&[BOS, 5, 6, EOS]).build();
        let m = build_mask(&s);
        for q in 0..4 {
            for k in 0..4 {
                assert_eq!(m.allowed(q, k), k <= q);
            }
        }
    }

    #[test]
    fn single_segment_mask() {
        // [T, BOI, I, I, EOI, T]
        let s = TokenStream::builder()
            .text(5)
            .image(patches(2, 3), 7)
            .text(6)
            .build();
        assert_eq!(s.segments(), &[ImageSegment { start: 2, len: 2, t: 7 }]);
        let m = build_mask(&s);
        let visible = |q: usize| (0..6).filter(|&k| m.allowed(q, k)).collect::<Vec<_>>();
        assert_eq!(visible(2), vec![0, 1, 2, 3]);
        assert_eq!(visible(3), vec![0, 1, 2, 3]);
        assert_eq!(visible(1), vec![0, 1]);
        assert_eq!(visible(4), vec![0, 1, 2, 3, 4]);
        assert_eq!(visible(5), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn cross_segment_attention_is_causal_only() {
        let s = TokenStream::builder()
            .text(BOS)
            .image(patches(2, 3), 1)
            .image(patches(2, 3), 1)
            .build();
        let m = build_mask(&s);
        let (a, b) = (s.segments()[0], s.segments()[1]);
        for q in b.range() {
            for k in a.range() {
                assert!(m.allowed(q, k), "later segment sees earlier");
                assert!(!m.allowed(k, q), "earlier segment never sees later");
            }
        }
        for q in 0..s.len() {
            assert!(m.allowed(q, q));
        }
    }

    #[test]
    fn validation() {
        let ok = TokenStream::builder().text(BOS).image(patches(2, 3), 0).text(EOS).build();
        ok.validate(24, 2, 3).unwrap();
        assert!(ok.validate(24, 4, 3).is_err());
        assert!(ok.validate(24, 2, 4).is_err());
        let oov = TokenStream::builder().text(99).build();
        assert_eq!(
            oov.validate(24, 2, 3),
            Err(Error::TokenOutOfVocab { id: 99, vocab: 24 })
        );
        let unbracketed = TokenStream::builder()
            .text(BOS)
            .raw_patches(patches(2, 3), 0)
            .text(EOI)
            .build();
        assert!(unbracketed.validate(24, 2, 3).is_err());
        let unclosed = TokenStream::builder()
            .texts(&[BOS, BOI])
            .raw_patches(patches(2, 3), 0)
            .build();
        assert!(unclosed.validate(24, 2, 3).is_err());
    }

    #[test]
    fn from_tokens_derives_segments() {
        let toks = vec![
            Token::Text(BOI),
            Token::Patch(vec![0.0]),
            Token::Patch(vec![0.0]),
            Token::Text(EOI),
        ];
        let s = TokenStream::from_tokens(toks.clone(), &[3]).unwrap();
        assert_eq!(s.segments(), &[ImageSegment { start: 1, len: 2, t: 3 }]);
        assert!(TokenStream::from_tokens(toks, &[]).is_err());
    }
}
