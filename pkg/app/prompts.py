"""Default prompt templates, one per LLM-backed stage.

Literal braces in bodies are doubled; single-brace names are placeholders.
"""
from app.llm import PromptTemplate

SYSTEM = "You are a knowledgeable, careful AI assistant."

REWRITER = PromptTemplate(
    name="rewriter",
    system=SYSTEM,
    required_vars=frozenset({"question", "max_queries"}),
    body=(
        "### Task: Enhanced Question Rewriting\n"
        "Rewrite the user's original question into a clear, explicit and standardized question. "
        "Resolve colloquial expressions, abbreviations and jargon into standard terminology, and keep "
        "every constraint the user stated.\n"
        "Then generate up to {max_queries} fine-grained search queries. Each query must target exactly one "
        "semantic aspect of the question that needs external knowledge, and no two queries may be the same.\n\n"
        "Original Question: {question}\n\n"
        'Return a JSON object: {{"rewritten": "<rewritten question>", "queries": ["<query 1>", "..."]}}'
    ),
)

SIMPLE_REWRITER = PromptTemplate(
    name="simple_rewriter",
    system=SYSTEM,
    required_vars=frozenset({"question"}),
    body=(
        "### Task: Query Rewriting\n"
        "Rewrite the question below into one search-engine query that would retrieve the answer.\n\n"
        "Question: {question}\n\n"
        'Return a JSON object: {{"query": "<search query>"}}'
    ),
)

FILTER = PromptTemplate(
    name="filter",
    system=SYSTEM,
    required_vars=frozenset({"premise", "hypothesis"}),
    body=(
        "### Task: Natural Language Inference\n"
        "Decide the relation between the premise and the hypothesis.\n"
        "- entailment: the premise supports the hypothesis\n"
        "- contradiction: the premise contradicts the hypothesis\n"
        "- neutral: the premise neither supports nor contradicts the hypothesis\n\n"
        "Premise: {premise}\n\n"
        "Hypothesis: {hypothesis}\n\n"
        'Return a JSON object: {{"label": "entailment|contradiction|neutral", "rationale": "<one sentence>"}}'
    ),
)

HYPOTHESIS = "The passage contains the information needed to answer: {question}"

READER_BASIC = PromptTemplate(
    name="reader_basic",
    system=SYSTEM,
    required_vars=frozenset({"question", "context_section", "instruction"}),
    body=(
        "### Task: Question Answering\n"
        "{instruction}\n"
        "{context_section}"
        "Question: {question}\n"
        "Answer:"
    ),
)

READER_PERSONALIZED = PromptTemplate(
    name="reader_personalized",
    system=SYSTEM,
    required_vars=frozenset({"question", "context_section", "instruction", "profile"}),
    body=(
        "### Task: Personalized Question Answering\n"
        "{instruction}\n"
        "Tailor the answer to the user described in the profile: match their interests, address their "
        "current demands and respect their personal circumstances. Do not mention the profile explicitly.\n\n"
        "User Profile:\n{profile}\n\n"
        "{context_section}"
        "Question: {question}\n"
        "Answer:"
    ),
)

WITH_CONTEXT_INSTRUCTION = "Answer the question using the numbered context passages below."
BACKOFF_INSTRUCTION = "No external context is available. Answer the question from your own internal knowledge."

SNIPPET = PromptTemplate(
    name="snippet",
    system=SYSTEM,
    required_vars=frozenset({"content"}),
    body=(
        "### Task: Knowledge Summary\n"
        "Write a succinct one-sentence description (at most 200 characters) of the knowledge in the passage, "
        "suitable as an index entry.\n\n"
        "Passage: {content}\n\n"
        'Return a JSON object: {{"snippet": "<summary>"}}'
    ),
)

PROFILE = PromptTemplate(
    name="profile",
    system=SYSTEM,
    required_vars=frozenset({"transcript"}),
    body=(
        "### Task: User Profile Extraction\n"
        "Analyse the session between the user and the AI assistant and extract new information about the user:\n"
        "1. theme_preferences: topics the user engaged with and their attitude, one of interest "
        "(extensive engagement), disinterest (lack of interest or dissatisfaction) or neutrality "
        "(indifferent or non-committal).\n"
        "2. question_demands: the problem-solving intent behind the user's questions.\n"
        "3. basic_information: facts such as employment, residence, age or gender.\n"
        "4. personalized_information: distinctive personal tags, e.g. vegetarian, late sleeper.\n"
        "Only include what the session supports; use empty lists when nothing is known.\n\n"
        "Session:\n{transcript}\n\n"
        'Return a JSON object: {{"theme_preferences": [{{"topic": "...", "attitude": "interest"}}], '
        '"question_demands": ["..."], "basic_information": {{"key": "value"}}, '
        '"personalized_information": ["..."]}}'
    ),
)

JUDGE = PromptTemplate(
    name="judge",
    system="You are an impartial judge of AI assistant responses.",
    required_vars=frozenset({"question", "answer_a", "answer_b", "aspects", "profile_section"}),
    body=(
        "### Task: Pairwise Comparison\n"
        "Compare the two responses to the user's question on {aspects}. "
        "Do not let response order or length influence your decision.\n"
        "{profile_section}"
        "Question: {question}\n\n"
        "[Assistant A]\n{answer_a}\n[End of Assistant A]\n\n"
        "[Assistant B]\n{answer_b}\n[End of Assistant B]\n\n"
        'Return a JSON object: {{"winner": "A|B|tie", "reason": "<one sentence>"}}'
    ),
)

JUDGE_ASPECTS = "helpfulness, relevance, detailedness, consistency, and depth"
JUDGE_PERSONALIZED_ASPECTS = JUDGE_ASPECTS + ", and alignment with the user's profile"

MSMTQA = PromptTemplate(
    name="msmtqa",
    system="You write realistic conversations between a user and an AI assistant.",
    required_vars=frozenset({"persona", "theme", "rounds", "attitudes", "history"}),
    body=(
        "### Task: Simulated Conversation\n"
        "Write one session of {rounds} rounds between the user below and an AI assistant. "
        "The user asks knowledge-intensive questions about the theme {theme}. In every round after the "
        "first, the user's message first reacts to the previous assistant answer with the given attitude "
        "(interest: ask a deeper follow-up; disinterest: express dissatisfaction and change the angle; "
        "neutrality: acknowledge briefly and move on) and then asks the next question.\n\n"
        "User persona: {persona}\n"
        "Attitude per round: {attitudes}\n"
        "Earlier sessions with this user:\n{history}\n\n"
        'Return a JSON object: {{"rounds": [{{"user": "...", "assistant": "..."}}]}}'
    ),
)
