// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rmot/boxes.hpp"
#include "rmot/params.hpp"
#include "rmot/text.hpp"

namespace rmot {

enum class Category { Car, Person };
enum class Color { Red, Blue, Light, Dark };
enum class Side { Left, Right };
enum class Direction { Same, Opposite, Ahead };

inline const char* to_string(Category c) { return c == Category::Car ? "car" : "person"; }
inline const char* to_string(Color c) {
    static constexpr const char* names[] = {"red", "blue", "light", "dark"};
    return names[static_cast<int>(c)];
}
inline const char* to_string(Side s) { return s == Side::Left ? "left" : "right"; }
inline const char* to_string(Direction d) {
    static constexpr const char* names[] = {"same", "opposite", "ahead"};
    return names[static_cast<int>(d)];
}

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {
template <class E, std::size_t N>
E parse_enum(const std::string& s, const std::array<E, N>& all) {
    for (E e : all)
        if (s == to_string(e)) return e;
    throw ParseError("unknown value '" + s + "'");
}
}  // namespace detail

struct ObjectTruth {
    int id = 0;
    Category category = Category::Car;
    Color color = Color::Red;
    double vx = 0.0;  // px per frame
    double vy = 0.0;
    int birth = 0;  // first visible frame
    std::vector<std::optional<Box>> boxes;

    bool visible(int frame) const {
        return frame >= 0 && static_cast<std::size_t>(frame) < boxes.size() && boxes[static_cast<std::size_t>(frame)].has_value();
    }
    const Box& box(int frame) const { return *boxes.at(static_cast<std::size_t>(frame)); }

    friend bool operator==(const ObjectTruth&, const ObjectTruth&) = default;
};

struct Expression {
    int template_id = 0;
    Category category = Category::Car;
    std::optional<Color> color;
    std::optional<Side> side;
    std::optional<Direction> direction;
    std::string text;

    friend bool operator==(const Expression&, const Expression&) = default;
};

struct Scenario {
    std::uint64_t seed = 0;
    int n_frames = 0;
    int width = 64;
    int height = 64;
    std::vector<ObjectTruth> objects;
    Expression expression;
    std::vector<std::vector<int>> referents;  // per frame, ascending ids

    const ObjectTruth& object(int id) const {
        for (const auto& o : objects)
            if (o.id == id) return o;
        throw ContractError("scenario: unknown object id " + std::to_string(id));
    }

    friend bool operator==(const Scenario&, const Scenario&) = default;
};

struct WorldParams {
    int n_objects = 6;
    int n_frames = 20;
    double spawn_rate = 0.5;
    int canvas = 64;
    double exit_rate = 0.25;
};

// ---------------------------------------------------------------------------
// Semantics

/// Conjunction of the expression's filled slots. "left" is cx < 0.5;
/// "same" direction means moving up the canvas (away from the viewer),
/// "opposite" moving down; "ahead" is the upper canvas half.
inline bool semantics(const Expression& e, const ObjectTruth& o, int frame) {
    if (!o.visible(frame)) throw ContractError("semantics: object not visible at frame");
    const Box& b = o.box(frame);
    if (o.category != e.category) return false;
    if (e.color && o.color != *e.color) return false;
    if (e.side) {
        const bool left = b.cx < 0.5;
        if ((*e.side == Side::Left) != left) return false;
    }
    if (e.direction) {
        switch (*e.direction) {
            case Direction::Same:
                if (!(o.vy < 0.0)) return false;
                break;
            case Direction::Opposite:
                if (!(o.vy > 0.0)) return false;
                break;
            case Direction::Ahead:
                if (!(b.cy < 0.5)) return false;
                break;
        }
    }
    return true;
}

inline std::vector<std::vector<int>> compute_referents(const std::vector<ObjectTruth>& objects, const Expression& e,
                                                       int n_frames) {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(n_frames));
    for (int f = 0; f < n_frames; ++f) {
        for (const auto& o : objects)
            if (o.visible(f) && semantics(e, o, f)) out[static_cast<std::size_t>(f)].push_back(o.id);
        std::sort(out[static_cast<std::size_t>(f)].begin(), out[static_cast<std::size_t>(f)].end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Expressions

inline constexpr int kTemplateCount = 8;

inline bool template_has_color(int t) { return t % 2 == 1; }
inline bool template_has_side(int t) { return t == 2 || t == 3; }
inline bool template_has_motion(int t) { return t == 4 || t == 5; }
inline bool template_has_ahead(int t) { return t == 6 || t == 7; }

/// Renders the template text. `synonym` picks between the two category words.
inline std::string render_expression(const Expression& e, bool synonym) {
    std::ostringstream os;
    if (e.color) {
        os << to_string(*e.color) << ' ';
        if (*e.color == Color::Light || *e.color == Color::Dark) os << "colored ";
    }
    if (e.category == Category::Car) os << (synonym ? "vehicles" : "cars");
    else os << (synonym ? "pedestrians" : "people");
    if (e.side) os << " on the " << to_string(*e.side);
    if (e.direction && *e.direction != Direction::Ahead) {
        os << (e.category == Category::Car ? " moving" : " who are walking") << " in the " << to_string(*e.direction)
           << " direction";
    }
    if (e.direction && *e.direction == Direction::Ahead) os << (e.color ? " which are" : "") << " ahead of us";
    return os.str();
}

// ---------------------------------------------------------------------------
// Generation

inline Scenario generate(std::uint64_t seed, const WorldParams& params) {
    if (params.n_objects <= 0 || params.n_frames <= 0 || params.canvas <= 0 || params.spawn_rate < 0.0) {
        throw ContractError("generate: parameters must be positive");
    }
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + 0x5EEDULL);
    Scenario s;
    s.seed = seed;
    s.n_frames = params.n_frames;
    s.width = s.height = params.canvas;
    const double W = params.canvas;
    std::vector<int> births;
    for (int i = 0; i < params.n_objects; ++i) {
        const bool mid = params.n_frames > 1 && rng.bernoulli(params.spawn_rate);
        births.push_back(mid ? static_cast<int>(rng.integer(1, params.n_frames - 1)) : 0);
    }
    if (params.spawn_rate > 0.0 && params.n_frames > 1 &&
        std::none_of(births.begin(), births.end(), [](int b) { return b > 0; })) {
        births.back() = static_cast<int>(rng.integer(1, params.n_frames - 1));
    }
    for (int i = 0; i < params.n_objects; ++i) {
        ObjectTruth o;
        o.id = i + 1;
        o.category = rng.bernoulli(0.5) ? Category::Car : Category::Person;
        o.color = static_cast<Color>(rng.integer(0, 3));
        o.birth = births[static_cast<std::size_t>(i)];
        double bw = 0.0, bh = 0.0;
        if (o.category == Category::Car) {
            bw = rng.uniform(0.16, 0.26) * W;
            bh = rng.uniform(0.11, 0.16) * W;
        } else {
            bw = rng.uniform(0.08, 0.12) * W;
            bh = rng.uniform(0.16, 0.22) * W;
        }
        const double speed_x = rng.uniform(0.3, 1.5), speed_y = rng.uniform(0.3, 1.2);
        o.vx = rng.bernoulli(0.5) ? speed_x : -speed_x;
        o.vy = rng.bernoulli(0.5) ? speed_y : -speed_y;
        const double x0 = rng.uniform(bw / 2, W - bw / 2);
        const double y0 = rng.uniform(bh / 2, W - bh / 2);
        int death = params.n_frames;
        if (rng.bernoulli(params.exit_rate) && o.birth + 4 < params.n_frames) {
            death = static_cast<int>(rng.integer(o.birth + 4, params.n_frames - 1));
        }
        o.boxes.assign(static_cast<std::size_t>(params.n_frames), std::nullopt);
        for (int f = o.birth; f < death; ++f) {
            const double t = f - o.birth;
            const double cx = std::clamp(x0 + o.vx * t, bw / 2, W - bw / 2);
            const double cy = std::clamp(y0 + o.vy * t, bh / 2, W - bh / 2);
            o.boxes[static_cast<std::size_t>(f)] = Box{cx / W, cy / W, bw / W, bh / W};
        }
        s.objects.push_back(std::move(o));
    }
    // Expression anchored on a random object so referents are usually nonempty.
    const auto& anchor = s.objects[static_cast<std::size_t>(rng.integer(0, params.n_objects - 1))];
    Expression& e = s.expression;
    e.template_id = static_cast<int>(rng.integer(0, kTemplateCount - 1));
    e.category = anchor.category;
    if (template_has_color(e.template_id)) e.color = anchor.color;
    if (template_has_side(e.template_id)) e.side = anchor.box(anchor.birth).cx < 0.5 ? Side::Left : Side::Right;
    if (template_has_motion(e.template_id)) e.direction = anchor.vy < 0.0 ? Direction::Same : Direction::Opposite;
    if (template_has_ahead(e.template_id)) e.direction = Direction::Ahead;
    e.text = render_expression(e, rng.bernoulli(0.5));
    s.referents = compute_referents(s.objects, e, s.n_frames);
    return s;
}

inline std::vector<Scenario> generate_dataset(std::uint64_t seed, std::size_t count, const WorldParams& params) {
    std::vector<Scenario> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate(seed * 1000003ULL + i, params));
    return out;
}

/// Objects in their first visible frame.
inline std::size_t count_mid_sequence_newborns(const Scenario& s) {
    return static_cast<std::size_t>(std::count_if(s.objects.begin(), s.objects.end(), [](const ObjectTruth& o) { return o.birth > 0; }));
}

// ---------------------------------------------------------------------------
// Rendering

struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> rgb;  // row-major, 3 channels in [0,1]

    Image() = default;
    Image(int w, int h, std::array<double, 3> fill) : width(w), height(h), rgb(static_cast<std::size_t>(w * h * 3)) {
        for (std::size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<std::ptrdiff_t>(i));
    }

    std::array<double, 3> pixel(int x, int y) const {
        const std::size_t i = static_cast<std::size_t>((y * width + x) * 3);
        return {rgb[i], rgb[i + 1], rgb[i + 2]};
    }
    void set(int x, int y, const std::array<double, 3>& c) {
        if (x < 0 || y < 0 || x >= width || y >= height) return;
        const std::size_t i = static_cast<std::size_t>((y * width + x) * 3);
        rgb[i] = c[0];
        rgb[i + 1] = c[1];
        rgb[i + 2] = c[2];
    }
};

inline constexpr std::array<double, 3> kBackground = {0.45, 0.55, 0.45};

inline std::array<double, 3> color_rgb(Color c) {
    switch (c) {
        case Color::Red: return {0.9, 0.12, 0.1};
        case Color::Blue: return {0.12, 0.25, 0.9};
        case Color::Light: return {0.93, 0.93, 0.88};
        case Color::Dark: return {0.1, 0.1, 0.13};
    }
    return {0, 0, 0};
}

/// Flat background; cars are filled rectangles, people filled ellipses.
/// A pixel is covered when its center lies inside the shape.
inline Image render(const Scenario& s, int frame) {
    if (frame < 0 || frame >= s.n_frames) throw ContractError("render: frame out of range");
    Image img(s.width, s.height, kBackground);
    for (const auto& o : s.objects) {
        if (!o.visible(frame)) continue;
        const Box& b = o.box(frame);
        const double cx = b.cx * s.width, cy = b.cy * s.height;
        const double hw = b.w * s.width / 2, hh = b.h * s.height / 2;
        const auto col = color_rgb(o.color);
        for (int y = std::max(0, static_cast<int>(cy - hh) - 1); y <= std::min(s.height - 1, static_cast<int>(cy + hh) + 1); ++y) {
            for (int x = std::max(0, static_cast<int>(cx - hw) - 1); x <= std::min(s.width - 1, static_cast<int>(cx + hw) + 1); ++x) {
                const double px = x + 0.5, py = y + 0.5;
                bool inside = false;
                if (o.category == Category::Car) {
                    inside = std::fabs(px - cx) <= hw && std::fabs(py - cy) <= hh;
                } else {
                    const double dx = (px - cx) / hw, dy = (py - cy) / hh;
                    inside = dx * dx + dy * dy <= 1.0;
                }
                if (inside) img.set(x, y, col);
            }
        }
    }
    return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    for (double v : img.rgb) {
        const auto byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        os.put(static_cast<char>(byte));
    }
}

/// One-pixel rectangle outline in normalized box coordinates.
inline void draw_box(Image& img, const Box& b, const std::array<double, 3>& col) {
    const int x0 = static_cast<int>(std::floor(b.x0() * img.width)), x1 = static_cast<int>(std::ceil(b.x1() * img.width)) - 1;
    const int y0 = static_cast<int>(std::floor(b.y0() * img.height)), y1 = static_cast<int>(std::ceil(b.y1() * img.height)) - 1;
    for (int x = x0; x <= x1; ++x) {
        img.set(x, y0, col);
        img.set(x, y1, col);
    }
    for (int y = y0; y <= y1; ++y) {
        img.set(x0, y, col);
        img.set(x1, y, col);
    }
}

// ---------------------------------------------------------------------------
// JSON-lines persistence

inline nlohmann::json to_json(const Scenario& s) {
    using nlohmann::json;
    json objs = json::array();
    for (const auto& o : s.objects) {
        json boxes = json::array();
        for (const auto& b : o.boxes) boxes.push_back(b ? json::array({b->cx, b->cy, b->w, b->h}) : json(nullptr));
        objs.push_back({{"id", o.id},
                        {"category", to_string(o.category)},
                        {"color", to_string(o.color)},
                        {"vx", o.vx},
                        {"vy", o.vy},
                        {"birth", o.birth},
                        {"boxes", boxes}});
    }
    const Expression& e = s.expression;
    json ex = {{"template", e.template_id}, {"category", to_string(e.category)}, {"text", e.text}};
    ex["color"] = e.color ? json(to_string(*e.color)) : json(nullptr);
    ex["side"] = e.side ? json(to_string(*e.side)) : json(nullptr);
    ex["direction"] = e.direction ? json(to_string(*e.direction)) : json(nullptr);
    return {{"seed", s.seed},   {"n_frames", s.n_frames}, {"width", s.width},          {"height", s.height},
            {"objects", objs}, {"expression", ex},      {"referents", s.referents}};
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
    static constexpr std::array<Category, 2> cats = {Category::Car, Category::Person};
    static constexpr std::array<Color, 4> cols = {Color::Red, Color::Blue, Color::Light, Color::Dark};
    static constexpr std::array<Side, 2> sides = {Side::Left, Side::Right};
    static constexpr std::array<Direction, 3> dirs = {Direction::Same, Direction::Opposite, Direction::Ahead};
    Scenario s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.n_frames = j.at("n_frames").get<int>();
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    for (const auto& jo : j.at("objects")) {
        ObjectTruth o;
        o.id = jo.at("id").get<int>();
        o.category = detail::parse_enum(jo.at("category").get<std::string>(), cats);
        o.color = detail::parse_enum(jo.at("color").get<std::string>(), cols);
        o.vx = jo.at("vx").get<double>();
        o.vy = jo.at("vy").get<double>();
        o.birth = jo.at("birth").get<int>();
        for (const auto& jb : jo.at("boxes")) {
            if (jb.is_null()) o.boxes.emplace_back(std::nullopt);
            else o.boxes.emplace_back(Box{jb.at(0).get<double>(), jb.at(1).get<double>(), jb.at(2).get<double>(), jb.at(3).get<double>()});
        }
        if (o.boxes.size() != static_cast<std::size_t>(s.n_frames)) throw ParseError("object box count differs from n_frames");
        s.objects.push_back(std::move(o));
    }
    const auto& je = j.at("expression");
    Expression& e = s.expression;
    e.template_id = je.at("template").get<int>();
    e.category = detail::parse_enum(je.at("category").get<std::string>(), cats);
    if (!je.at("color").is_null()) e.color = detail::parse_enum(je.at("color").get<std::string>(), cols);
    if (!je.at("side").is_null()) e.side = detail::parse_enum(je.at("side").get<std::string>(), sides);
    if (!je.at("direction").is_null()) e.direction = detail::parse_enum(je.at("direction").get<std::string>(), dirs);
    e.text = je.at("text").get<std::string>();
    tokenize(e.text);
    s.referents = j.at("referents").get<std::vector<std::vector<int>>>();
    if (s.referents.size() != static_cast<std::size_t>(s.n_frames)) throw ParseError("referent list length differs from n_frames");
    return s;
}

inline void save_dataset(const std::string& path, const std::vector<Scenario>& scenarios) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    for (const auto& s : scenarios) os << to_json(s).dump() << '\n';
    if (!os) throw std::runtime_error("write failed for " + path);
}

inline std::vector<Scenario> parse_dataset(std::istream& is) {
    std::vector<Scenario> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(scenario_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& ex) {
            throw ParseError("dataset line " + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return out;
}

inline std::vector<Scenario> load_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open dataset " + path);
    return parse_dataset(is);
}

}  // namespace rmot
