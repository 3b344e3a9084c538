//! Splitting utterance text on `[image: ...]` / `[music: ...]` markers.
//! Unknown or unclosed brackets stay plain text; rendering the parts back
//! reproduces the input byte for byte.

use super::{MediaKind, Part};

pub fn parse_placeholders(text: &str) -> Vec<Part> {
    let mut parts = Vec::new();
    let mut text_start = 0usize;
    let mut i = 0usize;
    while i < text.len() {
        if text.as_bytes()[i] == b'[' {
            let rest = &text[i + 1..];
            let kind = if rest.starts_with("image:") {
                Some(MediaKind::Image)
            } else if rest.starts_with("music:") {
                Some(MediaKind::Music)
            } else {
                None
            };
            if let Some(kind) = kind {
                let body_start = i + 1 + 6;
                if let Some(close) = text[body_start..].find(']') {
                    if text_start < i {
                        parts.push(Part::text(&text[text_start..i]));
                    }
                    parts.push(Part::Placeholder {
                        kind,
                        raw: text[body_start..body_start + close].to_string(),
                        media: None,
                    });
                    i = body_start + close + 1;
                    text_start = i;
                    continue;
                }
            }
        }
        i += 1;
        while i < text.len() && !text.is_char_boundary(i) {
            i += 1;
        }
    }
    if text_start < text.len() {
        parts.push(Part::text(&text[text_start..]));
    }
    parts
}

pub fn render_parts(parts: &[Part]) -> String {
    let mut out = String::new();
    for p in parts {
        match p {
            Part::Text { text } => out.push_str(text),
            Part::Placeholder { kind, raw, .. } => {
                out.push('[');
                out.push_str(kind.as_str());
                out.push(':');
                out.push_str(raw);
                out.push(']');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_around_markers() {
        let parts = parse_placeholders("look [image: a dog] here");
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0], Part::text("look "));
        assert!(matches!(&parts[1], Part::Placeholder { kind: MediaKind::Image, .. }));
        assert_eq!(parts[1].description(), Some("a dog"));
        assert_eq!(parts[2], Part::text(" here"));
    }

    #[test]
    fn music_description_keeps_commas() {
        let parts = parse_placeholders("[music: calm piano, lo-fi]");
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].description(), Some("calm piano, lo-fi"));
    }

    #[test]
    fn unclosed_and_unknown_stay_text() {
        assert_eq!(parse_placeholders("[image: x"), vec![Part::text("[image: x")]);
        assert_eq!(parse_placeholders("a [video: x] b"), vec![Part::text("a [video: x] b")]);
    }

    #[test]
    fn rendering_is_lossless() {
        let cases = [
            "look [image: a dog] here",
            "[music:no-space]",
            "[[image: nested] tail",
            "text only",
            "",
            "[image: a] [music: b] [image: c]",
            "unicode préfix [image: café] ☃",
            "[image: x",
            "odd ] brackets [ everywhere ][",
        ];
        for case in cases {
            assert_eq!(render_parts(&parse_placeholders(case)), case, "case {case:?}");
        }
    }
}
