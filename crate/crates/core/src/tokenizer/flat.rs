use super::{expect_padding, grammar, is_coord, read_vertex, FaceBuilder, QuantMesh, TokenError, BOS, EOS};

/// BOS, nine tokens per face in canonical order, EOS.
pub(super) fn encode(q: &QuantMesh) -> Vec<u16> {
    let mut faces: Vec<[[u16; 3]; 3]> = q.faces.iter().map(|f| [q.keys[f[0]], q.keys[f[1]], q.keys[f[2]]]).collect();
    faces.sort_unstable();
    let mut out = Vec::with_capacity(9 * faces.len() + 2);
    out.push(BOS);
    for f in faces {
        for v in f {
            out.extend_from_slice(&v);
        }
    }
    out.push(EOS);
    out
}

pub(super) fn decode(tokens: &[u16]) -> (FaceBuilder, Option<TokenError>) {
    let mut b = FaceBuilder::new();
    if tokens.first() != Some(&BOS) {
        return (b, Some(grammar(0, "sequence must start with BOS")));
    }
    let mut pos = 1;
    loop {
        match tokens.get(pos) {
            None => return (b, Some(grammar(pos, "missing EOS"))),
            Some(&EOS) => return (b, expect_padding(tokens, pos + 1)),
            Some(&t) if !is_coord(t) => {
                return (b, Some(grammar(pos, format!("expected a vertex, found {}", super::token_name(t)))))
            }
            Some(_) => {}
        }
        let mut face = [0usize; 3];
        for (i, slot) in face.iter_mut().enumerate() {
            match read_vertex(tokens, pos + 3 * i) {
                Ok(k) => *slot = b.vertex(k),
                Err(e) => return (b, Some(e)),
            }
        }
        if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
            return (b, Some(grammar(pos, "face repeats a vertex")));
        }
        b.push(face);
        pos += 9;
    }
}
