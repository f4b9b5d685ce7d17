"""Regenerates vehicle_claims.csv, a synthetic stand-in with the Vehicle Claims columns.

    python3 generate.py > vehicle_claims.csv
"""
import csv
import random
import sys

MODELS = {
    "Ford": ["Fiesta", "Focus", "Kuga", "Mondeo"],
    "Vauxhall": ["Corsa", "Astra", "Insignia"],
    "BMW": ["1 Series", "3 Series", "X3"],
    "Audi": ["A3", "A4", "Q5"],
    "Toyota": ["Yaris", "Corolla", "RAV4"],
    "Nissan": ["Micra", "Qashqai", "Leaf"],
    "Peugeot": ["208", "308", "3008"],
    "Volkswagen": ["Polo", "Golf", "Tiguan"],
}
BODY = {"Kuga": "SUV", "X3": "SUV", "Q5": "SUV", "RAV4": "SUV", "Qashqai": "SUV", "3008": "SUV", "Tiguan": "SUV",
        "Mondeo": "Saloon", "Insignia": "Saloon", "3 Series": "Saloon", "A4": "Saloon"}
COLORS = ["Black", "White", "Silver", "Blue", "Red", "Grey"]
ISSUES = {
    "Engine": ["ENG-01", "ENG-02", "ENG-07"],
    "Transmission": ["TRN-03", "TRN-05"],
    "Brakes": ["BRK-02", "BRK-04"],
    "Electrical": ["ELC-01", "ELC-06", "ELC-09"],
    "Bodywork": ["BDY-02", "BDY-08"],
    "Suspension": ["SUS-01", "SUS-04"],
}
HEADER = ["Maker", "Genmodel", "Color", "Reg_year", "Bodytype", "Engin_size", "Gearbox", "Fuel_type",
          "Runned_Miles", "Price", "Seat_num", "Door_num", "issue", "issue_id", "repair_complexity",
          "repair_hours", "repair_cost", "Label"]


def row(rng):
    maker = rng.choice(sorted(MODELS))
    model = rng.choice(MODELS[maker])
    body = BODY.get(model, rng.choice(["Hatchback", "Hatchback", "Estate", "Coupe"]))
    year = rng.randint(2005, 2020)
    fuel = "Electric" if model == "Leaf" else rng.choice(["Petrol", "Petrol", "Diesel", "Diesel", "Hybrid"])
    engine = "" if fuel == "Electric" else rng.choice(["1.0", "1.2", "1.4", "1.6", "2.0", "2.5", "3.0"])
    miles = max(500, int(rng.gauss((2021 - year) * 9000, 12000)))
    price = max(900, int(rng.gauss(28000 - (2021 - year) * 1500, 3000)))
    seats = 7 if body == "SUV" and rng.random() < 0.3 else (2 if body == "Coupe" else 5)
    doors = 3 if body == "Coupe" else 5
    issue = rng.choice(sorted(ISSUES))
    issue_id = rng.choice(ISSUES[issue])
    complexity = rng.choices(["Low", "Medium", "High"], [5, 3, 2])[0]
    hours = round(rng.uniform(0.5, 4.0) * {"Low": 1, "Medium": 2, "High": 4}[complexity], 1)
    cost = round(hours * rng.uniform(45, 75) + rng.uniform(20, 300))

    # anomalous: unusually expensive per hour, or complex electrical work
    suspicious = rng.random() < 0.75
    anomalous = (suspicious and (complexity == "High" or issue == "Electrical")) or rng.random() < 0.1
    if anomalous:
        cost = round(cost * rng.uniform(1.8, 3.0))

    color = "" if rng.random() < 0.02 else rng.choice(COLORS)
    return [maker, model, color, year, body, engine, rng.choice(["Manual", "Automatic"]), fuel, miles, price,
            seats, doors, issue, issue_id, complexity, hours, cost, int(anomalous)]


def main():
    rng = random.Random(20231016)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(HEADER)
    for _ in range(1000):
        w.writerow(row(rng))


if __name__ == "__main__":
    main()
