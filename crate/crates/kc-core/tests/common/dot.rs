//! Minimal validating parser for the DOT graph-description language
//! (directed graphs; the statement forms the exporter may emit: nodes,
//! edges, attribute lists, `rank=...` assignments, anonymous subgraphs).

#[derive(Debug, Clone, PartialEq)]
enum Token {
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Semi,
    Comma,
    Eq,
    Arrow,
    Id(String),
}

fn tokenize(text: &str) -> Result<Vec<Token>, String> {
    let mut tokens = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '{' => {
                tokens.push(Token::LBrace);
                i += 1;
            }
            '}' => {
                tokens.push(Token::RBrace);
                i += 1;
            }
            '[' => {
                tokens.push(Token::LBracket);
                i += 1;
            }
            ']' => {
                tokens.push(Token::RBracket);
                i += 1;
            }
            ';' => {
                tokens.push(Token::Semi);
                i += 1;
            }
            ',' => {
                tokens.push(Token::Comma);
                i += 1;
            }
            '=' => {
                tokens.push(Token::Eq);
                i += 1;
            }
            '-' => {
                if chars.get(i + 1) == Some(&'>') {
                    tokens.push(Token::Arrow);
                    i += 2;
                } else {
                    return Err(format!("stray '-' at {i}"));
                }
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            s.push(*chars.get(i + 1).ok_or("dangling escape")?);
                            i += 2;
                        }
                        Some(&c) => {
                            s.push(c);
                            i += 1;
                        }
                        None => return Err("unterminated string".to_owned()),
                    }
                }
                tokens.push(Token::Id(s));
            }
            c if c.is_alphanumeric() || c == '_' || c == '.' => {
                let mut s = String::new();
                while i < chars.len()
                    && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.')
                {
                    s.push(chars[i]);
                    i += 1;
                }
                tokens.push(Token::Id(s));
            }
            other => return Err(format!("unexpected character {other:?} at {i}")),
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eat(&mut self, expected: &Token) -> Result<(), String> {
        match self.peek() {
            Some(t) if t == expected => {
                self.pos += 1;
                Ok(())
            }
            other => Err(format!("expected {expected:?}, found {other:?}")),
        }
    }

    fn eat_id(&mut self) -> Result<String, String> {
        match self.peek().cloned() {
            Some(Token::Id(s)) => {
                self.pos += 1;
                Ok(s)
            }
            other => Err(format!("expected identifier, found {other:?}")),
        }
    }

    fn attr_list(&mut self) -> Result<(), String> {
        self.eat(&Token::LBracket)?;
        while self.peek() != Some(&Token::RBracket) {
            self.eat_id()?;
            self.eat(&Token::Eq)?;
            self.eat_id()?;
            if matches!(self.peek(), Some(Token::Comma) | Some(Token::Semi)) {
                self.pos += 1;
            }
        }
        self.eat(&Token::RBracket)
    }

    fn stmt_list(&mut self) -> Result<(), String> {
        loop {
            match self.peek() {
                Some(Token::RBrace) | None => return Ok(()),
                Some(Token::Semi) => {
                    self.pos += 1;
                }
                Some(Token::LBrace) => {
                    self.pos += 1;
                    self.stmt_list()?;
                    self.eat(&Token::RBrace)?;
                }
                Some(Token::Id(_)) => {
                    let first = self.eat_id()?;
                    match self.peek() {
                        // assignment: rank=same / rankdir=BT
                        Some(Token::Eq) => {
                            self.pos += 1;
                            self.eat_id()?;
                        }
                        // edge statement: a -> b (-> c)* [attrs]
                        Some(Token::Arrow) => {
                            while self.peek() == Some(&Token::Arrow) {
                                self.pos += 1;
                                self.eat_id()?;
                            }
                            if self.peek() == Some(&Token::LBracket) {
                                self.attr_list()?;
                            }
                        }
                        // node statement (possibly `node [defaults]`)
                        Some(Token::LBracket) => {
                            self.attr_list()?;
                        }
                        _ => {
                            let _ = first;
                        }
                    }
                }
                other => return Err(format!("unexpected token {other:?}")),
            }
        }
    }
}

/// Validates DOT text, returning a description of the first syntax error.
#[allow(dead_code)]
pub fn validate(text: &str) -> Result<(), String> {
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0 };
    let kw = p.eat_id()?;
    if kw != "digraph" && kw != "graph" {
        return Err(format!("expected digraph/graph, found {kw}"));
    }
    if matches!(p.peek(), Some(Token::Id(_))) {
        p.eat_id()?;
    }
    p.eat(&Token::LBrace)?;
    p.stmt_list()?;
    p.eat(&Token::RBrace)?;
    if p.peek().is_some() {
        return Err("trailing tokens after closing brace".to_owned());
    }
    Ok(())
}
