//! Depth-first half-edge traversal.
//!
//! A component starts at its smallest unvisited face `(a, b, c)` (rotated so
//! `a` has the smallest key), written as nine tokens; the first component
//! follows BOS directly and later ones are introduced by NEW_COMP. The
//! half-edges `c->a`, `b->c`, `a->b` are pushed, so `a->b` is popped first.
//!
//! Popping `u->v` looks at the face across it, the one holding `v->u`:
//! - already emitted: nothing is written (the decoder sees the same face);
//! - not yet emitted: that face is `(v, u, w)`; the apex `w` is written as
//!   three tokens and `w->v` then `u->w` are pushed;
//! - no such face (boundary): END_BRANCH is written.
//!
//! The decoder replays the same stack, so the grammar needs no lookahead.

use std::collections::{HashMap, HashSet};

use super::{
    expect_padding, grammar, is_coord, read_vertex, token_name, FaceBuilder, QuantMesh, TokenError,
    BOS, END_BRANCH, EOS, NEW_COMP,
};

pub(super) fn encode(q: &QuantMesh) -> Result<Vec<u16>, TokenError> {
    let mut owner: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * q.faces.len());
    for (fi, f) in q.faces.iter().enumerate() {
        for k in 0..3 {
            let e = (f[k], f[(k + 1) % 3]);
            if owner.insert(e, fi).is_some() {
                return Err(TokenError::Winding {
                    from: q.keys[e.0],
                    to: q.keys[e.1],
                });
            }
        }
    }
    let mut order: Vec<usize> = (0..q.faces.len()).collect();
    order.sort_unstable_by_key(|&fi| {
        let f = q.faces[fi];
        [q.keys[f[0]], q.keys[f[1]], q.keys[f[2]]]
    });

    let mut visited = vec![false; q.faces.len()];
    let mut out = vec![BOS];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut first = true;
    for &start in &order {
        if visited[start] {
            continue;
        }
        if !first {
            out.push(NEW_COMP);
        }
        first = false;
        visited[start] = true;
        let [a, b, c] = q.faces[start];
        for v in [a, b, c] {
            out.extend_from_slice(&q.keys[v]);
        }
        stack.extend([(c, a), (b, c), (a, b)]);
        while let Some((u, v)) = stack.pop() {
            match owner.get(&(v, u)) {
                Some(&t) if visited[t] => {}
                Some(&t) => {
                    visited[t] = true;
                    let f = q.faces[t];
                    let w = f.into_iter().find(|&x| x != u && x != v).expect("triangle apex");
                    out.extend_from_slice(&q.keys[w]);
                    stack.push((w, v));
                    stack.push((u, w));
                }
                None => out.push(END_BRANCH),
            }
        }
    }
    out.push(EOS);
    Ok(out)
}

struct Replay {
    b: FaceBuilder,
    edges: HashSet<(usize, usize)>,
    stack: Vec<(usize, usize)>,
}

impl Replay {
    fn add_face(&mut self, f: [usize; 3], pos: usize) -> Result<(), TokenError> {
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(grammar(pos, "face repeats a vertex"));
        }
        for k in 0..3 {
            if self.edges.contains(&(f[k], f[(k + 1) % 3])) {
                return Err(grammar(pos, "face reuses a directed edge (inconsistent winding)"));
            }
        }
        for k in 0..3 {
            self.edges.insert((f[k], f[(k + 1) % 3]));
        }
        self.b.push(f);
        Ok(())
    }

    fn start_component(&mut self, tokens: &[u16], pos: usize) -> Result<(), TokenError> {
        let mut f = [0usize; 3];
        for (i, slot) in f.iter_mut().enumerate() {
            *slot = self.b.vertex(read_vertex(tokens, pos + 3 * i)?);
        }
        self.add_face(f, pos)?;
        let [a, b, c] = f;
        self.stack.extend([(c, a), (b, c), (a, b)]);
        Ok(())
    }
}

pub(super) fn decode(tokens: &[u16]) -> (FaceBuilder, Option<TokenError>) {
    let mut r = Replay {
        b: FaceBuilder::new(),
        edges: HashSet::new(),
        stack: Vec::new(),
    };
    let err = run(tokens, &mut r).err();
    (r.b, err)
}

fn run(tokens: &[u16], r: &mut Replay) -> Result<(), TokenError> {
    if tokens.first() != Some(&BOS) {
        return Err(grammar(0, "sequence must start with BOS"));
    }
    let mut pos = 1;
    match tokens.get(pos) {
        None => return Err(grammar(pos, "missing EOS")),
        Some(&EOS) => {
            return match expect_padding(tokens, pos + 1) {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Some(_) => {
            r.start_component(tokens, pos)?;
            pos += 9;
        }
    }
    loop {
        if let Some((u, v)) = r.stack.pop() {
            if r.edges.contains(&(v, u)) {
                continue;
            }
            match tokens.get(pos) {
                None => return Err(grammar(pos, "sequence ended with open half-edges")),
                Some(&END_BRANCH) => pos += 1,
                Some(&t) if is_coord(t) => {
                    let w = r.b.vertex(read_vertex(tokens, pos)?);
                    r.add_face([v, u, w], pos)?;
                    r.stack.push((w, v));
                    r.stack.push((u, w));
                    pos += 3;
                }
                Some(&t) => {
                    return Err(grammar(
                        pos,
                        format!("expected a vertex or END_BRANCH, found {}", token_name(t)),
                    ))
                }
            }
        } else {
            match tokens.get(pos) {
                None => return Err(grammar(pos, "missing EOS")),
                Some(&EOS) => {
                    return match expect_padding(tokens, pos + 1) {
                        Some(e) => Err(e),
                        None => Ok(()),
                    }
                }
                Some(&NEW_COMP) => {
                    r.start_component(tokens, pos + 1)?;
                    pos += 10;
                }
                Some(&END_BRANCH) => return Err(grammar(pos, "stack underflow: END_BRANCH with no open half-edge")),
                Some(&t) => return Err(grammar(pos, format!("expected NEW_COMP or EOS, found {}", token_name(t)))),
            }
        }
    }
}
