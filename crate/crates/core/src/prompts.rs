//! Prompt templates. Placeholders are `{name}` and are filled in a single
//! pass by [`fill`], so substituted text is never re-expanded.

pub const USER_GENERATOR: &str = "Please construct {num} entries related to {area}, including identity, reason, and questions, and present them in a Python list format without any additional content.";

pub const USER_GENERATOR_RETRY: &str = "Your previous reply could not be parsed ({error}). Reply again with only a Python list of dictionaries, each with the keys \"identity\", \"reason\" and \"questions\".";

pub const ACTION_STEP: &str = "Now, you are a person currently conducting an operation related to {area_name}. Based on your objective and previous operation information (if any), carry out this operation and record the expenses:

{now_memory}

Conditions to be met:

1. The operation is carried out in sessions — only one activity per session;

2. Record expense items related to {area_name}, with the specific amount for each item specified. Do not record the total of all expenses;

3. The response should be as concise and clear as possible.
Reference Information:

{ref}";

pub const MEMORY_UPDATE: &str = "Now, you are a personnel currently conducting an operation related to {area_name}. This is your current action:

{act}

This is your previous memory:

{now_memory}

You need to organize and form new memories based on these two.

**Conditions to be met:**

1. Record expense items related to **{area_name}**, with the specific amount for each item specified. Do not record the total of all expenses;

2. Keep your objective in mind;

3. Your response should be as concise and clear as possible.";

pub const USER_INTERACT: &str = "Now, you are a user seeking consultation related to **{area_name}**.

Here is some information related to your issue:

{memory}

**User Dialogue Requirements:**

1. Based on the provided information, introduce your personal background in line with the context, maintaining a natural and conversational tone;

2. In each round of dialogue, only express one point — break down your question and explain it step by step to the assistant;

3. Each round of dialogue should be limited to 1–2 sentences, and the conversation should not exceed **{dia_len}** rounds;

4. Stay in character as the user — do not respond as an **{area_name}** assistant, and do not output \"User:\" or any guiding/prompting statements;

5. Within **{dia_len}** rounds, ensure that all relevant information and numerical details about the issue are conveyed.
{extra}
**Dialogue History:**

{history}";

pub const ASSISTANT_INTERACT: &str = "Now, you are a virtual **{area_name}** assistant.

Here is some rule information related to **{area_name}**:

{ref}

**Assistant Dialogue Requirements:**

1. Ensure the conversation is concise and natural;

2. Provide content solely related to **{area_name}**, referencing the rule information as needed. Give a clear response on whether expenses can be processed. If they can be processed, specify the exact amount that can be handled — you may fabricate details if necessary;

3. Output only one round of dialogue at a time, engaging in step-by-step communication with the user. There is no need to record the total sum of all expenses;

4. Maintain the role of the **{area_name}** assistant — do not respond as a user, and do not output \"Assistant:\" or any guiding/prompting statements;

5. Limit each round of dialogue to 1–2 sentences;

6. Do not initiate the end of the conversation.
{extra}
**Dialogue History:**

{history}";

const SCORE_TAIL: &str = "Output only a single integer representing your score (e.g., 3). Do not include any other text, punctuation, spaces, or explanations.

Dialogue content below:
";

pub const SCORE_COHERENCE_HEAD: &str = "You are a dialogue quality evaluator. Please strictly score the semantic coherence of the provided dialogue according to the following criteria on a scale from 1 to 5:

5/5: Fully coherent and consistent; every turn closely follows the context, with clear logic and unified intent.

4/5: Mostly coherent and consistent; only minor, infrequent lapses in context or slight repetitions.

3/5: Generally understandable but contains noticeable semantic jumps, contradictions, or inconsistencies with prior content.

2/5: Poor coherence; multiple responses deviate from the topic or clearly conflict with earlier statements.

1/5: Severely inconsistent; the dialogue lacks logical connection and fails to form meaningful interaction.
";

pub const SCORE_FLUENCY_HEAD: &str = "You are a dialogue quality evaluator. Please strictly score the fluency of the provided dialogue according to the following criteria on a scale from 1 to 5:

5/5: Extremely natural and fluent; language is idiomatic, tone appropriate, and indistinguishable from real human conversation.

4/5: Generally natural, with only occasional slightly awkward or uncommon phrasing that does not disrupt overall fluency.

3/5: Acceptable but exhibits some mechanical phrasing, repetition, or expressions that deviate from everyday usage.

2/5: Clearly unnatural; language is stiff, formulaic, or frequently uses implausible wordings.

1/5: Highly unnatural; language is bizarre, incoherent, or severely deviates from normal human communication.
";

pub const SCORE_DIVERSITY_HEAD: &str = "You are a dialogue quality evaluator. Please strictly score the lexical and stylistic diversity of the provided dialogue according to the following criteria on a scale from 1 to 5:

5/5: Highly diverse; demonstrates rich vocabulary, varied sentence structures, and creative, expressive language.

4/5: Generally diverse; minor repetitions or similar phrasings occur occasionally but do not diminish overall richness.

3/5: Moderately diverse; some responses show repetitive wording, fixed patterns, or limited stylistic variation.

2/5: Lacks diversity; frequently relies on similar expressions or templated phrases, resulting in monotony.

1/5: Extremely low diversity; nearly every turn repeats the same phrasing or mechanically reuses identical patterns.
";

pub const SCORE_REASK: &str = "Your reply could not be read as a score. Output only a single integer from 1 to 5.";

pub fn score_prompt(head: &str, dialogue: &str) -> String {
    format!("{head}\n{SCORE_TAIL}\n{dialogue}")
}

pub const TOPIC_SUMMARY: &str = "Summarize the topic of the following dialogue in a short phrase of at most eight words. Output only the topic.

Dialogue content below:

{dialogue}";

pub const PROBLEM_GENERATION: &str = "You are a problem generation model building a reasoning benchmark from task-oriented dialogues. Write one new logical reasoning question that can only be answered by combining several facts from the dialogue below. Match or exceed the difficulty of the reference problem, which current models frequently fail.

Dialogue:
{dialogue}

Reference difficult problem ({kind}):
{problem}

Reply in exactly this format:
Kind: <math or common-sense>
Question: <the question>";

pub const PROBLEM_GENERATION_RETRY: &str = "Your reply did not follow the required format. Reply with two lines only:
Kind: <math or common-sense>
Question: <the question>";

/// Stand-in for `{problem}` when no difficult exemplar exists yet.
pub const NO_REFERENCE_PROBLEM: &str = "None available yet. Write a question that needs at least two separate facts from the dialogue.";

pub const ANSWER_QUESTION: &str = "Read the dialogue and answer the question. {answer_rule} Output only the final result.

Dialogue:
{dialogue}

Question: {question}";

pub const MATH_ANSWER_RULE: &str = "The answer is a single number.";
pub const YES_NO_ANSWER_RULE: &str = "The answer is yes or no.";

/// Substitutes `{key}` placeholders. Unknown placeholders are left as is.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let key = close.map(|c| &after[..c]);
        match key.and_then(|k| vars.iter().find(|(name, _)| *name == k)) {
            Some((_, value)) => {
                out.push_str(value);
                rest = &after[close.unwrap() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
