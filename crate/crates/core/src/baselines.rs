//! Parameter-free First Sentence baseline. The recurrent baseline lives in
//! [`crate::model::rnn`] and shares training and decoding with the main model.

use crate::error::{Error, Result};

/// Text up to and including the first `.`, `!` or `?` that is followed by
/// whitespace or the end of the text, trimmed. Without a terminator the
/// whole trimmed body is returned.
pub fn first_sentence(body: &str) -> Result<String> {
    let body = body.trim();
    if body.is_empty() {
        return Err(Error::Input("article body is empty".into()));
    }
    let mut chars = body.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|&(_, n)| n.is_whitespace()) {
            return Ok(body[..i + c.len_utf8()].trim().to_string());
        }
    }
    Ok(body.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_at_first_terminator() {
        let body = "southwest airlines said yesterday that it would add 16 flights a day from chicago midway \
                    airport, moving to protect a valuable hub. southwest said that...";
        assert!(first_sentence(body).unwrap().ends_with("valuable hub."));
        assert_eq!(first_sentence("a. b. c.").unwrap(), "a.");
        assert_eq!(first_sentence("what? no!").unwrap(), "what?");
    }

    #[test]
    fn terminator_needs_following_space() {
        assert_eq!(first_sentence("pi is 3.14 today. yes").unwrap(), "pi is 3.14 today.");
        assert_eq!(first_sentence("  hello world  ").unwrap(), "hello world");
    }

    #[test]
    fn empty_body_is_input_error() {
        assert!(matches!(first_sentence(" \n"), Err(Error::Input(_))));
    }
}
